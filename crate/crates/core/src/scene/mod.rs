//! Synthetic ego-centric driving scenes.
//!
//! Coordinates are meters in the ego frame: the ego agent sits at the origin
//! at the last observed step, facing +y, with +x to its right.

mod bev;
mod caption;
mod maneuver;
mod synth;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorError};

pub use bev::{compose_bev, BEV_IMAGE_CHANNELS, BEV_MAP_CHANNELS};
pub use caption::{render_caption, template_pool};
pub use maneuver::{classify_maneuver, ManeuverThresholds};
pub use synth::{
    generate_dataset, generate_dataset_with, generate_scene, simulate_track, speed_range,
    SynthConfig, LANE_CHANGE_STEPS, LANE_WIDTH,
};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentType {
    Car,
    Pedestrian,
    Cyclist,
    Bus,
}

impl AgentType {
    pub const ALL: [AgentType; 4] = [Self::Car, Self::Pedestrian, Self::Cyclist, Self::Bus];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Car => "car",
            Self::Pedestrian => "pedestrian",
            Self::Cyclist => "cyclist",
            Self::Bus => "bus",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| Error::Lookup {
                kind: "agent type",
                name: name.to_string(),
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    Stationary,
    Straight,
    TurnLeft,
    TurnRight,
    LaneChangeLeft,
    LaneChangeRight,
}

impl Maneuver {
    pub const ALL: [Maneuver; 6] = [
        Self::Stationary,
        Self::Straight,
        Self::TurnLeft,
        Self::TurnRight,
        Self::LaneChangeLeft,
        Self::LaneChangeRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Stationary => "stationary",
            Self::Straight => "straight",
            Self::TurnLeft => "turn_left",
            Self::TurnRight => "turn_right",
            Self::LaneChangeLeft => "lane_change_left",
            Self::LaneChangeRight => "lane_change_right",
        }
    }
}

/// Dense `h × w × d` raster, serialized as `{shape, data}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        Self {
            shape: [h, w, d],
            data: vec![0.0; h * w * d],
        }
    }

    pub fn height(&self) -> usize {
        self.shape[0]
    }

    pub fn width(&self) -> usize {
        self.shape[1]
    }

    pub fn depth(&self) -> usize {
        self.shape[2]
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[(row * self.shape[1] + col) * self.shape[2] + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f64) {
        let w = self.shape[1];
        let d = self.shape[2];
        self.data[(row * w + col) * d + ch] = v;
    }

    pub fn to_tensor(&self) -> std::result::Result<Tensor, TensorError> {
        Tensor::new(self.shape.to_vec(), self.data.clone())
    }
}

/// Per-agent decoded mixture in the ego frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub rho: Vec<f64>,
    /// `M × T_f` means.
    pub mu: Vec<Vec<Point>>,
    /// `M × T_f` per-axis standard deviations.
    pub sigma: Vec<Vec<Point>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub observed: Vec<Point>,
    pub future: Vec<Point>,
    pub agent_type: AgentType,
    /// Unit heading at the last observed step.
    pub heading: Point,
    pub maneuver: Maneuver,
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<Prediction>,
}

impl Agent {
    pub fn current(&self) -> Point {
        *self.observed.last().expect("observed track is nonempty")
    }

    /// Observed followed by future positions.
    pub fn full_track(&self) -> Vec<Point> {
        self.observed.iter().chain(&self.future).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub agents: Vec<Agent>,
    pub bev_image: Grid,
    pub bev_map: Grid,
    pub ego_index: usize,
    pub grid_extent: f64,
}

impl Scene {
    /// Continuous grid coordinates `(x, y)` of an ego-frame point; `x` runs
    /// along the width. The square `[-extent/2, extent/2]²` maps onto
    /// `[0, w-1] × [0, h-1]`.
    pub fn ego_world_to_grid(&self, p: Point) -> Point {
        world_to_grid(p, self.grid_extent, self.bev_image.height(), self.bev_image.width())
    }

    pub fn grid_to_ego_world(&self, g: Point) -> Point {
        grid_to_world(g, self.grid_extent, self.bev_image.height(), self.bev_image.width())
    }

    pub fn is_validation(&self) -> bool {
        self.scene_id.is_multiple_of(5)
    }

    /// Structural checks on a loaded scene.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("scene {}: {m}", self.scene_id)));
        if self.agents.is_empty() {
            return bad("no agents".into());
        }
        if self.ego_index >= self.agents.len() {
            return bad("ego index out of range".into());
        }
        let t_obs = self.agents[0].observed.len();
        let t_fut = self.agents[0].future.len();
        if t_obs < 2 || t_fut < 1 {
            return bad("tracks too short".into());
        }
        for a in &self.agents {
            if a.observed.len() != t_obs || a.future.len() != t_fut {
                return bad("agents disagree on track lengths".into());
            }
            if a.captions.len() != 3 {
                return bad("every agent needs three captions".into());
            }
            let n = (a.heading[0].powi(2) + a.heading[1].powi(2)).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return bad("heading is not a unit vector".into());
            }
        }
        let (i, m) = (&self.bev_image, &self.bev_map);
        if i.data.len() != i.shape.iter().product::<usize>()
            || m.data.len() != m.shape.iter().product::<usize>()
        {
            return bad("grid payload does not match its shape".into());
        }
        if i.height() < 4 || i.width() < 4 {
            return bad("grid must be at least 4 × 4".into());
        }
        if !(self.grid_extent > 0.0) {
            return bad("grid extent must be positive".into());
        }
        Ok(())
    }
}

pub fn world_to_grid(p: Point, extent: f64, h: usize, w: usize) -> Point {
    [
        (p[0] / extent + 0.5) * (w - 1) as f64,
        (p[1] / extent + 0.5) * (h - 1) as f64,
    ]
}

pub fn grid_to_world(g: Point, extent: f64, h: usize, w: usize) -> Point {
    [
        (g[0] / (w - 1) as f64 - 0.5) * extent,
        (g[1] / (h - 1) as f64 - 0.5) * extent,
    ]
}

pub fn write_jsonl(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_scenes(&mut out, scenes)?;
    out.flush()?;
    Ok(())
}

pub fn write_scenes(out: &mut impl Write, scenes: &[Scene]) -> Result<()> {
    for s in scenes {
        serde_json::to_writer(&mut *out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Scene>> {
    let reader = BufReader::new(File::open(path)?);
    let mut scenes = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line)?;
        scene.validate()?;
        scenes.push(scene);
    }
    Ok(scenes)
}

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::bev::{render_image, render_map};
use super::{render_caption, Agent, AgentType, Maneuver, ManeuverThresholds, Point, Scene};
use crate::error::{config_err, Result};
use crate::par::{self, Exec};

/// Lateral shift of a lane change, in meters.
pub const LANE_WIDTH: f64 = 3.5;
/// Steps over which a lane change completes (capped by the horizon).
pub const LANE_CHANGE_STEPS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Observed steps `T`.
    pub t_obs: usize,
    /// Future steps `T_f`.
    pub t_future: usize,
    /// Seconds per step.
    pub dt: f64,
    /// Standard deviation (m) of the position noise. Labels stay sound up to
    /// 0.05 m.
    pub noise: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Meters covered by the grid per side.
    pub extent: f64,
    /// Non-ego agents start their last observed step in `[-r, r]²`.
    pub spawn_radius: f64,
    pub thresholds: ManeuverThresholds,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            t_obs: 4,
            t_future: 12,
            dt: 0.5,
            noise: 0.03,
            grid_h: 32,
            grid_w: 32,
            extent: 100.0,
            spawn_radius: 10.0,
            thresholds: ManeuverThresholds::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_obs < 2 {
            return Err(config_err("data.t_obs must be at least 2"));
        }
        if self.t_future < 1 {
            return Err(config_err("data.t_future must be at least 1"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(config_err("data.dt must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(config_err("data.noise must be nonnegative"));
        }
        if self.grid_h < 4 || self.grid_w < 4 {
            return Err(config_err("data.grid_h and data.grid_w must be at least 4"));
        }
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return Err(config_err("data.extent must be positive"));
        }
        if !(self.spawn_radius >= 0.0 && self.spawn_radius.is_finite()) {
            return Err(config_err("data.spawn_radius must be nonnegative"));
        }
        let th = &self.thresholds;
        if !(th.eps_stationary > 0.0 && th.theta_turn > 0.0 && th.d_lane > 0.0) {
            return Err(config_err("maneuver thresholds must be positive"));
        }
        Ok(())
    }
}

/// Speed range (m/s) a moving agent of this type draws from.
pub fn speed_range(t: AgentType) -> (f64, f64) {
    match t {
        AgentType::Car => (3.0, 6.0),
        AgentType::Bus => (2.0, 4.5),
        AgentType::Cyclist => (2.0, 4.0),
        AgentType::Pedestrian => (0.8, 1.5),
    }
}

fn rotate(v: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Noise-free track at steps `1..=T+T_f` for an agent at `p0` at step 0.
///
/// The history is a straight line at constant speed. The maneuver starts
/// after step `T`: turns sweep 90° along a circular arc over the horizon,
/// lane changes shift one lane sideways on a cosine profile.
pub fn simulate_track(
    p0: Point,
    heading: Point,
    speed: f64,
    maneuver: Maneuver,
    cfg: &SynthConfig,
) -> Vec<Point> {
    let (t_obs, t_f) = (cfg.t_obs, cfg.t_future);
    let step = speed * cfg.dt;
    let left = [-heading[1], heading[0]];
    let mut out = Vec::with_capacity(t_obs + t_f);
    let mut p = p0;
    for _ in 0..t_obs {
        p = [p[0] + step * heading[0], p[1] + step * heading[1]];
        out.push(p);
    }
    let anchor = p;
    match maneuver {
        Maneuver::TurnLeft | Maneuver::TurnRight => {
            let sign = if maneuver == Maneuver::TurnLeft { 1.0 } else { -1.0 };
            let dphi = FRAC_PI_2 / t_f as f64;
            // Chord of an arc of length `step` subtending `dphi`.
            let chord = step * (dphi / 2.0).sin() / (dphi / 2.0);
            for j in 1..=t_f {
                let dir = rotate(heading, sign * dphi * (j as f64 - 0.5));
                p = [p[0] + chord * dir[0], p[1] + chord * dir[1]];
                out.push(p);
            }
        }
        Maneuver::LaneChangeLeft | Maneuver::LaneChangeRight => {
            let sign = if maneuver == Maneuver::LaneChangeLeft { 1.0 } else { -1.0 };
            let span = LANE_CHANGE_STEPS.min(t_f);
            for j in 1..=t_f {
                let s = j.min(span) as f64 / span as f64;
                let lat = sign * LANE_WIDTH * (1.0 - (PI * s).cos()) / 2.0;
                let lon = step * j as f64;
                out.push([
                    anchor[0] + lon * heading[0] + lat * left[0],
                    anchor[1] + lon * heading[1] + lat * left[1],
                ]);
            }
        }
        Maneuver::Stationary | Maneuver::Straight => {
            for _ in 0..t_f {
                p = [p[0] + step * heading[0], p[1] + step * heading[1]];
                out.push(p);
            }
        }
    }
    out
}

/// One scene, seeded by `(seed, scene_id)` alone so scenes can be built in
/// any order.
pub fn generate_scene(seed: u64, scene_id: u64, n_agents: usize, cfg: &SynthConfig) -> Result<Scene> {
    if n_agents == 0 {
        return Err(config_err("a scene needs at least one agent"));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene_id);
    let noise = (cfg.noise > 0.0)
        .then(|| Normal::new(0.0, cfg.noise))
        .transpose()
        .map_err(|e| config_err(e.to_string()))?;
    let t_obs = cfg.t_obs;

    let mut tracks = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let agent_type = if i == 0 {
            AgentType::Car
        } else {
            AgentType::ALL[rng.random_range(0..AgentType::ALL.len())]
        };
        let maneuver = Maneuver::ALL[rng.random_range(0..Maneuver::ALL.len())];
        let (lo, hi) = speed_range(agent_type);
        let speed = if maneuver == Maneuver::Stationary {
            0.0
        } else {
            rng.random_range(lo..hi)
        };
        let angle = if i == 0 {
            FRAC_PI_2
        } else {
            rng.random_range(0.0..2.0 * PI)
        };
        let heading = if i == 0 { [0.0, 1.0] } else { [angle.cos(), angle.sin()] };
        let spawn = if i == 0 || cfg.spawn_radius == 0.0 {
            [0.0, 0.0]
        } else {
            let r = cfg.spawn_radius;
            [rng.random_range(-r..=r), rng.random_range(-r..=r)]
        };
        let mut track = simulate_track([0.0, 0.0], heading, speed, maneuver, cfg);
        let at_t = track[t_obs - 1];
        for p in &mut track {
            p[0] += spawn[0] - at_t[0];
            p[1] += spawn[1] - at_t[1];
            if let Some(n) = &noise {
                p[0] += n.sample(&mut rng);
                p[1] += n.sample(&mut rng);
            }
        }
        tracks.push((agent_type, maneuver, heading, track));
    }

    let origin = tracks[0].3[t_obs - 1];
    let agents: Vec<Agent> = tracks
        .into_iter()
        .map(|(agent_type, maneuver, heading, track)| {
            let shifted: Vec<Point> = track
                .iter()
                .map(|p| [p[0] - origin[0], p[1] - origin[1]])
                .collect();
            let mut agent = Agent {
                observed: shifted[..t_obs].to_vec(),
                future: shifted[t_obs..].to_vec(),
                agent_type,
                heading,
                maneuver,
                captions: Vec::new(),
                prediction: None,
            };
            agent.captions = render_caption(&agent).to_vec();
            agent
        })
        .collect();

    let bev_image = render_image(&agents, cfg.grid_h, cfg.grid_w, cfg.extent);
    let bev_map = render_map(&mut rng, cfg.grid_h, cfg.grid_w, cfg.extent);
    Ok(Scene {
        scene_id,
        agents,
        bev_image,
        bev_map,
        ego_index: 0,
        grid_extent: cfg.extent,
    })
}

/// Scenes `0..n_scenes`, built in parallel when available.
pub fn generate_dataset(seed: u64, n_scenes: usize, n_agents: usize, cfg: &SynthConfig) -> Result<Vec<Scene>> {
    generate_dataset_with(Exec::default(), seed, n_scenes, n_agents, cfg)
}

pub fn generate_dataset_with(
    exec: Exec,
    seed: u64,
    n_scenes: usize,
    n_agents: usize,
    cfg: &SynthConfig,
) -> Result<Vec<Scene>> {
    if n_scenes == 0 {
        return Err(config_err("at least one scene is required"));
    }
    if n_agents == 0 {
        return Err(config_err("at least one agent per scene is required"));
    }
    cfg.validate()?;
    par::try_map_range(exec, n_scenes, |id| generate_scene(seed, id as u64, n_agents, cfg))
}

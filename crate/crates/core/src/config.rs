//! Flat `key = value` run configuration.
//!
//! Keys are dotted by section (`model.d_s = 32`). Lines starting with `#`
//! are comments. Unknown keys are rejected. [`Config::to_text`] emits every
//! key, so a resolved file reproduces a run on its own.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{config_err, Result};
use crate::guidance::{GuidanceConfig, Variant};
use crate::scene::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl FromStr for Optimizer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer `{other}`")),
        }
    }
}

impl Optimizer {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        }
    }
}

/// Network widths and counts.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_s: usize,
    pub d_pe: usize,
    pub d_interact: usize,
    /// Per-head value width inside deformable attention.
    pub d_v: usize,
    pub d_w: usize,
    pub hidden: usize,
    pub heads: usize,
    pub offsets: usize,
    pub modes: usize,
    pub n_blocks: usize,
    pub temporal_layers: usize,
    /// Positions are divided by this before entering `f_loc`.
    pub position_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_s: 32,
            d_pe: 8,
            d_interact: 16,
            d_v: 16,
            d_w: 32,
            hidden: 64,
            heads: 2,
            offsets: 4,
            modes: 10,
            n_blocks: 2,
            temporal_layers: 1,
            position_scale: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub b: f64,
    pub lambda_aux: f64,
    pub lambda_cl: f64,
    /// Evaluate the trajectory NLL exactly as printed, without `b` in the
    /// exponent.
    pub literal_nll: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            b: 1.0,
            lambda_aux: 0.5,
            lambda_cl: 0.1,
            literal_nll: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub steps: usize,
    pub batch_scenes: usize,
    pub optimizer: Optimizer,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub guidance: GuidanceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 1e-3,
            steps: 3000,
            batch_scenes: 8,
            optimizer: Optimizer::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            guidance: GuidanceConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let dims = [
            ("model.d_s", m.d_s),
            ("model.d_pe", m.d_pe),
            ("model.d_interact", m.d_interact),
            ("model.d_v", m.d_v),
            ("model.d_w", m.d_w),
            ("model.hidden", m.hidden),
            ("model.heads", m.heads),
            ("model.offsets", m.offsets),
            ("model.modes", m.modes),
            ("model.n_blocks", m.n_blocks),
            ("model.temporal_layers", m.temporal_layers),
            ("train.batch_scenes", self.batch_scenes),
        ];
        for (k, v) in dims {
            if v == 0 {
                return Err(config_err(format!("{k} must be at least 1")));
            }
        }
        if !(self.lr > 0.0) {
            return Err(config_err("train.lr must be positive"));
        }
        if !(m.position_scale > 0.0) {
            return Err(config_err("model.position_scale must be positive"));
        }
        if !(self.loss.b > 0.0) {
            return Err(config_err("loss.b must be positive"));
        }
        if self.loss.lambda_aux < 0.0 || self.loss.lambda_cl < 0.0 {
            return Err(config_err("loss weights must be nonnegative"));
        }
        self.guidance.validate()
    }
}

/// Everything a CLI run needs: data generation plus training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    pub data: SynthConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| config_err(format!("bad value `{value}` for {key}: {e}")))
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()
    }

    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let d = &mut self.data;
        let t = &mut self.train;
        match key.trim() {
            "seed" => t.seed = parse(key, value)?,
            "data.t_obs" => d.t_obs = parse(key, value)?,
            "data.t_future" => d.t_future = parse(key, value)?,
            "data.dt" => d.dt = parse(key, value)?,
            "data.noise" => d.noise = parse(key, value)?,
            "data.grid_h" => d.grid_h = parse(key, value)?,
            "data.grid_w" => d.grid_w = parse(key, value)?,
            "data.extent" => d.extent = parse(key, value)?,
            "data.spawn_radius" => d.spawn_radius = parse(key, value)?,
            "data.eps_stationary" => d.thresholds.eps_stationary = parse(key, value)?,
            "data.theta_turn_deg" => {
                d.thresholds.theta_turn = parse::<f64>(key, value)?.to_radians()
            }
            "data.d_lane" => d.thresholds.d_lane = parse(key, value)?,
            "model.d_s" => t.model.d_s = parse(key, value)?,
            "model.d_pe" => t.model.d_pe = parse(key, value)?,
            "model.d_interact" => t.model.d_interact = parse(key, value)?,
            "model.d_v" => t.model.d_v = parse(key, value)?,
            "model.d_w" => t.model.d_w = parse(key, value)?,
            "model.hidden" => t.model.hidden = parse(key, value)?,
            "model.heads" => t.model.heads = parse(key, value)?,
            "model.offsets" => t.model.offsets = parse(key, value)?,
            "model.modes" => t.model.modes = parse(key, value)?,
            "model.n_blocks" => t.model.n_blocks = parse(key, value)?,
            "model.temporal_layers" => t.model.temporal_layers = parse(key, value)?,
            "model.position_scale" => t.model.position_scale = parse(key, value)?,
            "loss.b" => t.loss.b = parse(key, value)?,
            "loss.lambda_aux" => t.loss.lambda_aux = parse(key, value)?,
            "loss.lambda_cl" => t.loss.lambda_cl = parse(key, value)?,
            "loss.literal_nll" => t.loss.literal_nll = parse(key, value)?,
            "guidance.theta_th" => t.guidance.theta_th = parse(key, value)?,
            "guidance.k" => t.guidance.k = parse(key, value)?,
            "guidance.tau" => t.guidance.tau = parse(key, value)?,
            "guidance.variant" => t.guidance.variant = parse::<Variant>(key, value)?,
            "guidance.literal_denominator" => t.guidance.literal_denominator = parse(key, value)?,
            "guidance.cross_scene" => t.guidance.cross_scene = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.steps" => t.steps = parse(key, value)?,
            "train.batch_scenes" => t.batch_scenes = parse(key, value)?,
            "train.optimizer" => t.optimizer = parse(key, value)?,
            "train.adam_beta1" => t.adam_beta1 = parse(key, value)?,
            "train.adam_beta2" => t.adam_beta2 = parse(key, value)?,
            "train.adam_eps" => t.adam_eps = parse(key, value)?,
            other => return Err(config_err(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(format!("override `{assignment}` is not key=value")))?;
        self.set(k, v)
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            cfg.apply_override(line)
                .map_err(|e| config_err(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let d = &self.data;
        let t = &self.train;
        let m = &t.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("seed", t.seed.to_string());
        kv("data.t_obs", d.t_obs.to_string());
        kv("data.t_future", d.t_future.to_string());
        kv("data.dt", format!("{:?}", d.dt));
        kv("data.noise", format!("{:?}", d.noise));
        kv("data.grid_h", d.grid_h.to_string());
        kv("data.grid_w", d.grid_w.to_string());
        kv("data.extent", format!("{:?}", d.extent));
        kv("data.spawn_radius", format!("{:?}", d.spawn_radius));
        kv("data.eps_stationary", format!("{:?}", d.thresholds.eps_stationary));
        kv("data.theta_turn_deg", format!("{:?}", d.thresholds.theta_turn.to_degrees()));
        kv("data.d_lane", format!("{:?}", d.thresholds.d_lane));
        kv("model.d_s", m.d_s.to_string());
        kv("model.d_pe", m.d_pe.to_string());
        kv("model.d_interact", m.d_interact.to_string());
        kv("model.d_v", m.d_v.to_string());
        kv("model.d_w", m.d_w.to_string());
        kv("model.hidden", m.hidden.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.offsets", m.offsets.to_string());
        kv("model.modes", m.modes.to_string());
        kv("model.n_blocks", m.n_blocks.to_string());
        kv("model.temporal_layers", m.temporal_layers.to_string());
        kv("model.position_scale", format!("{:?}", m.position_scale));
        kv("loss.b", format!("{:?}", t.loss.b));
        kv("loss.lambda_aux", format!("{:?}", t.loss.lambda_aux));
        kv("loss.lambda_cl", format!("{:?}", t.loss.lambda_cl));
        kv("loss.literal_nll", t.loss.literal_nll.to_string());
        kv("guidance.theta_th", format!("{:?}", t.guidance.theta_th));
        kv("guidance.k", t.guidance.k.to_string());
        kv("guidance.tau", format!("{:?}", t.guidance.tau));
        kv("guidance.variant", t.guidance.variant.as_str().to_string());
        kv("guidance.literal_denominator", t.guidance.literal_denominator.to_string());
        kv("guidance.cross_scene", t.guidance.cross_scene.to_string());
        kv("train.lr", format!("{:?}", t.lr));
        kv("train.steps", t.steps.to_string());
        kv("train.batch_scenes", t.batch_scenes.to_string());
        kv("train.optimizer", t.optimizer.as_str().to_string());
        kv("train.adam_beta1", format!("{:?}", t.adam_beta1));
        kv("train.adam_beta2", format!("{:?}", t.adam_beta2));
        kv("train.adam_eps", format!("{:?}", t.adam_eps));
        s
    }
}

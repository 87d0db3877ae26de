//! Trajectory prediction with BEV deformable attention, caption-driven
//! contrastive guidance and a Gaussian-mixture decoder, trained end to end
//! on synthetic driving scenes.

// Index loops mirror the math; negated comparisons also reject NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod guidance;
pub mod harness;
pub mod model;
pub mod par;
pub mod scene;
pub mod tensor;
pub mod visual;

pub use config::{Config, LossConfig, ModelConfig, Optimizer, TrainConfig};
pub use error::{Error, Result};

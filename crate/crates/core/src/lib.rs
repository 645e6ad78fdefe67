//! Multi-modal text recognition: a visual encoder, a position-query seed decoder,
//! an iterated language model, and a cross-modal fusion stage, trained end to end
//! on synthetic word images.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod lm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod seed;
pub mod training;
pub mod vision;

pub use config::{Config, DataConfig, FeVariant, MaskMode, ModelConfig, SesMode, TrainConfig};
pub use error::{Error, Result};
pub use fusion::Mode;
pub use model::{ForwardOutput, Matrn};
pub use training::{evaluate, Trainer};

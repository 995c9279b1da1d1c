//! Plain mask transformer: a frozen plain ViT encoder feeding a small joint
//! query/patch Transformer decoder, with training, evaluation and synthetic
//! data for CPU-scale experiments.

pub mod check;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod eomt;
pub mod error;
pub mod eval;
pub mod lateral;
pub mod loss;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod rope;
pub mod temporal;
pub mod train;

pub use config::Config;
pub use error::{PmtError, Result};
pub use model::{ModelVariant, SegModel};

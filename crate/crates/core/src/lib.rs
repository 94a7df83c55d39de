//! One-sided unpaired image-to-image translation trained with a multilayer,
//! patchwise contrastive objective in place of cycle-consistency, plus a
//! single-image training mode and an evaluation/visualization toolkit.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`nce`]: the contrastive losses (per-patch classification with internal
//!   or external negatives) and their gradients
//! - [`networks`]: generator (encoder/decoder with tap points), projection
//!   heads, discriminators
//! - [`objectives`]: adversarial terms, the R1 penalty, loss composition and
//!   gradient routing
//! - [`bank`]: momentum-averaged shadow networks and the FIFO negative queue
//! - [`data`]: unpaired loading, augmentation, index sampling, the
//!   single-image crop pipeline
//! - [`trainer`]: the optimization loop, checkpointing, inference
//! - [`eval`]: Fréchet distance, pixel-fraction statistic, visualizations
//! - [`config`]: presets, config resolution, run directories

pub mod bank;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod nce;
pub mod networks;
pub mod objectives;
pub mod optim;
pub mod nn;
pub mod scalar;
pub mod seeds;
pub mod synthetic;
pub mod trainer;

pub use config::{Preset, TrainConfig};
pub use error::{Error, Result};
pub use nce::{NceBatch, NceReduction, PatchEmbeddingSet};
pub use networks::{
    DiscriminatorSpec, DiscriminatorVariant, FeatureStack, GeneratorSpec, GeneratorVariant,
};
pub use objectives::{GanMode, NegativeSource, ObjectiveConfig};
pub use scalar::Scalar;
pub use trainer::{StepLosses, TrainData, Trainer};

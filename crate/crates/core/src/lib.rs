//! Joint classification of hyperspectral and LiDAR rasters with a
//! disentangled non-local attention model, at desk scale.
//!
//! The crate is organized around six pieces:
//!
//! - [`tape`]: dense f64 tensors with reverse-mode gradients for every
//!   operation the model uses.
//! - [`extract`]: multiscale residual HSI features, CNN LiDAR features, and
//!   their fusion into a mixed feature map.
//! - [`attention`]: the disentangled non-local block with configurable
//!   branch wiring over the three feature sources, plus the coupled
//!   non-local baseline.
//! - [`pipeline`]: model assembly, seeded training, OA/AA/Kappa evaluation,
//!   the wiring ablation grid and the NL/DNL comparison.
//! - [`data`]: flat binary rasters, patch sampling, synthetic confounded
//!   scenes, and classification-map rendering.
//! - [`config`]: the flat `key = value` experiment config behind the CLI.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod extract;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tape;
pub mod tensor;

pub use attention::{AttentionKind, AttentionParams, Source, WiringConfig};
pub use config::{DataSource, ExperimentConfig};
pub use error::{Error, Result};
pub use extract::ExtractorConfig;
pub use optim::Adam;
pub use params::{ParamId, Params};
pub use pipeline::{Evaluation, MetricsReport, Model, ModelConfig, TrainConfig};
pub use tape::{FeatureMap, Phase, Tape, Var};
pub use tensor::Tensor;

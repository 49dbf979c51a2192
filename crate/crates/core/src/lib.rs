//! Dynamic latent-graph and selective state-space classification of ROI
//! time series, with a frozen low-rank-adapted surrogate language model.
//!
//! Everything runs in 64-bit floats on the CPU. Randomness comes from
//! seeded ChaCha8 streams, so runs are reproducible across platforms.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod latent_graph;
pub mod model;
pub mod params;
pub mod scan;
pub mod ssm;
pub mod temporal;
pub mod tensor;
pub mod token_align;
pub mod train;

pub use autodiff::{Gradients, Graph, Var};
pub use data::{DatasetSplit, Label, RoiTimeSeries, SynthSpec};
pub use error::{Error, Result};
pub use model::{ModelConfig, Pipeline, Variant};
pub use params::{ParamStore, Role};
pub use scan::ScanBackend;
pub use tensor::Tensor;
pub use train::{Metrics, TrainConfig};

/// Version string recorded in run directories.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod analysis;
pub mod attention;
pub mod autograd;
pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod flops;
pub mod intervention;
pub mod live;
pub mod model;
pub mod optim;
pub mod seed;
pub mod tasks;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision instantiations used by the command line and the
/// acceptance runs.
pub type Tensor = tensor::Tensor<f64>;
pub type Parameters = model::Parameters<f64>;
pub type IcvBundle = intervention::IcvBundle<f64>;
pub type InterventionSpec = intervention::InterventionSpec<f64>;
pub type ExtractedVector = baselines::ExtractedVector<f64>;
pub type LoraAdapter = baselines::LoraAdapter<f64>;
pub type FunctionVectorReport = baselines::FunctionVectorReport<f64>;
pub type LiveOutcome = live::LiveOutcome<f64>;
pub type AttentionInstance = attention::AttentionInstance<f64>;
pub type Decomposition = attention::Decomposition<f64>;

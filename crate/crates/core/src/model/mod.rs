//! Miniature pre-norm decoder-only transformer with intervention hooks.

mod config;
mod forward;
mod generate;
mod params;
mod pretrain;

use std::path::Path;

pub use config::ModelConfig;
pub use forward::{forward, residual_streams, AttentionTrace, ForwardOptions, ForwardOutput};
pub(crate) use forward::{run_graph, HeadAdapter, TapeShift};
pub use generate::{generate, DecodeConfig};
pub use params::{init_model, LayerParams, Parameters};
pub use pretrain::{pretrain, sequence_gradients, PretrainHyper, PretrainOutcome, TrainingSequence};

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MODEL_TAG: &str = "model";

impl<T: Scalar> Parameters<T> {
    pub fn to_container(&self) -> Result<Container<T>> {
        let mut c = Container::new(
            MODEL_TAG,
            serde_json::json!({ "config": serde_json::to_value(&self.config)? }),
        );
        for (name, t) in self.named() {
            c.push(name, (**t).clone());
        }
        Ok(c)
    }

    pub fn from_container(c: Container<T>) -> Result<Self> {
        if c.tag != MODEL_TAG {
            return Err(Error::Checkpoint(format!("expected a model, found {:?}", c.tag)));
        }
        let config: ModelConfig = serde_json::from_value(
            c.metadata
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("model manifest lacks config".into()))?,
        )?;
        config.validate()?;
        Parameters::from_named(&config, c.tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

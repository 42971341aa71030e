use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the miniature decoder: learned absolute positions,
/// pre-norm blocks and an untied `d x N` unembedding.
///
/// With `recency_bias` each head also subtracts `slope_h * (i - j)` from the
/// score of query `i` on key `j`, with geometric slopes `2^(-8(h+1)/H)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub recency_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_mlp: 256,
            vocab_size: 128,
            max_seq_len: 512,
            recency_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_mlp", self.d_mlp),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Per-head recency slopes; empty when the bias is off.
    pub fn head_slopes(&self) -> Vec<f64> {
        if !self.recency_bias {
            return Vec::new();
        }
        let h = self.n_heads as f64;
        (0..self.n_heads)
            .map(|i| 2f64.powf(-8.0 * (i as f64 + 1.0) / h))
            .collect()
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (d, m, n, s) = (self.d_model, self.d_mlp, self.vocab_size, self.max_seq_len);
        let per_layer = 2 * d // ln1
            + 4 * d * d + 4 * d // q, k, v, o with biases
            + 2 * d // ln2
            + d * m + m // mlp in
            + m * d + d; // mlp out
        n * d + s * d + self.n_layers * per_layer + 2 * d + d * n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("divisible"));
    }

    #[test]
    fn default_param_count_by_hand() {
        // embeddings 128*64 + 512*64, per layer 49_984, final norm 128, unembedding 64*128
        let per_layer = 128 + 4 * 4096 + 256 + 128 + 16_384 + 256 + 16_384 + 64;
        assert_eq!(per_layer, 49_984);
        let expected = 8192 + 32_768 + 4 * per_layer + 128 + 8192;
        assert_eq!(ModelConfig::default().param_count(), expected);
    }
}

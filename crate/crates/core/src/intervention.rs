//! Declarative descriptions of how a vector edits the residual stream.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-layer shift vectors with scalar gates. With `shared` set a single
/// vector and gate are broadcast to every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct IcvBundle<T> {
    pub vectors: Vec<Vec<T>>,
    pub alphas: Vec<T>,
    pub shared: bool,
}

impl<T: Scalar> IcvBundle<T> {
    pub fn zeros(n_layers: usize, d: usize) -> Self {
        Self {
            vectors: vec![vec![T::zero(); d]; n_layers],
            alphas: vec![T::zero(); n_layers],
            shared: false,
        }
    }

    /// Checks the bundle against a model with `n_layers` layers of width `d`.
    pub fn validate(&self, n_layers: usize, d: usize) -> Result<()> {
        let expected = if self.shared { 1 } else { n_layers };
        if self.vectors.len() != expected || self.alphas.len() != expected {
            return Err(shape_err(
                "icv_bundle",
                format!(
                    "{} vectors / {} gates for {} layers (shared = {})",
                    self.vectors.len(),
                    self.alphas.len(),
                    n_layers,
                    self.shared
                ),
            ));
        }
        if self.vectors.iter().any(|v| v.len() != d) {
            return Err(shape_err("icv_bundle", format!("vector length must be {d}")));
        }
        let finite = self.alphas.iter().all(|a| a.is_finite())
            && self.vectors.iter().flatten().all(|x| x.is_finite());
        if !finite {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    /// Index into `vectors`/`alphas` for a model layer.
    pub fn slot(&self, layer: usize) -> usize {
        if self.shared {
            0
        } else {
            layer
        }
    }

    /// The applied shift `alpha_l * v_l` for `layer`.
    pub fn shift(&self, layer: usize) -> Vec<T> {
        let s = self.slot(layer);
        self.vectors[s].iter().map(|&x| x * self.alphas[s]).collect()
    }

    pub fn n_trainable(&self) -> usize {
        self.vectors.iter().map(Vec::len).sum::<usize>() + self.alphas.len()
    }

    pub fn negated(&self) -> Self {
        Self {
            vectors: self
                .vectors
                .iter()
                .map(|v| v.iter().map(|&x| -x).collect())
                .collect(),
            alphas: self.alphas.clone(),
            shared: self.shared,
        }
    }
}

/// How a forward pass is modified.
#[derive(Debug, Clone, PartialEq)]
pub enum InterventionSpec<T> {
    None,
    /// Every position's post-block residual at layer `l` gets `alpha_l * v_l`.
    AddPerLayer(IcvBundle<T>),
    /// The final prompt position's post-block residual at `layer` is replaced.
    ReplaceLastToken { layer: usize, vector: Vec<T> },
    /// `vector` is added to the final prompt position at `layer`.
    AddLastToken { layer: usize, vector: Vec<T> },
    /// `strength * unit(v_l)` is added to every position at every layer,
    /// optionally restoring each state's Euclidean norm afterwards.
    AddAllTokens {
        vectors: Vec<Vec<T>>,
        strength: T,
        renormalize: bool,
    },
    /// Low-rank update of the unembedding: logits gain `h_final A B`, with
    /// `A` of shape `d x r` and `B` of shape `r x N`.
    LowRankHead { a: Tensor<T>, b: Tensor<T> },
}

impl<T: Scalar> InterventionSpec<T> {
    pub fn kind(&self) -> InterventionKind {
        match self {
            InterventionSpec::None => InterventionKind::None,
            InterventionSpec::AddPerLayer(_) => InterventionKind::AddPerLayer,
            InterventionSpec::ReplaceLastToken { .. } => InterventionKind::ReplaceLastToken,
            InterventionSpec::AddLastToken { .. } => InterventionKind::AddLastToken,
            InterventionSpec::AddAllTokens { renormalize, .. } => InterventionKind::AddAllTokens {
                renormalize: *renormalize,
            },
            InterventionSpec::LowRankHead { a, .. } => InterventionKind::LowRankHead { rank: a.cols() },
        }
    }

    /// Checks shapes against a model; the vocabulary side of `LowRankHead`
    /// is checked by [`InterventionSpec::validate_head`].
    pub fn validate(&self, n_layers: usize, d: usize) -> Result<()> {
        let check_layer = |layer: usize| {
            if layer >= n_layers {
                Err(Error::OutOfRange {
                    what: "intervention layer",
                    index: layer,
                    limit: n_layers,
                })
            } else {
                Ok(())
            }
        };
        match self {
            InterventionSpec::None => Ok(()),
            InterventionSpec::AddPerLayer(b) => b.validate(n_layers, d),
            InterventionSpec::ReplaceLastToken { layer, vector }
            | InterventionSpec::AddLastToken { layer, vector } => {
                check_layer(*layer)?;
                if vector.len() != d {
                    return Err(shape_err("intervention", format!("vector length must be {d}")));
                }
                if !vector.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite);
                }
                Ok(())
            }
            InterventionSpec::AddAllTokens { vectors, strength, .. } => {
                if vectors.len() != n_layers || vectors.iter().any(|v| v.len() != d) {
                    return Err(shape_err(
                        "intervention",
                        format!("add_all_tokens needs {n_layers} vectors of length {d}"),
                    ));
                }
                if !(strength.is_finite() && vectors.iter().flatten().all(|x| x.is_finite())) {
                    return Err(Error::NonFinite);
                }
                Ok(())
            }
            InterventionSpec::LowRankHead { a, b } => {
                if a.rows() != d || a.cols() != b.rows() {
                    return Err(shape_err(
                        "intervention",
                        format!("low-rank head {:?} x {:?} for width {d}", a.shape(), b.shape()),
                    ));
                }
                if !(a.is_finite() && b.is_finite()) {
                    return Err(Error::NonFinite);
                }
                Ok(())
            }
        }
    }

    /// Extra check for head adapters: `B` must span the vocabulary.
    pub fn validate_head(&self, vocab_size: usize) -> Result<()> {
        match self {
            InterventionSpec::LowRankHead { b, .. } if b.cols() != vocab_size => Err(shape_err(
                "intervention",
                format!("low-rank head has {} outputs for vocabulary {vocab_size}", b.cols()),
            )),
            _ => Ok(()),
        }
    }
}

/// Shape-free tag of an intervention, used by the FLOPs estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    None,
    AddPerLayer,
    ReplaceLastToken,
    AddLastToken,
    AddAllTokens { renormalize: bool },
    LowRankHead { rank: usize },
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundle_validation() {
        let b = IcvBundle::<f64>::zeros(4, 8);
        b.validate(4, 8).unwrap();
        assert!(b.validate(3, 8).is_err());
        assert!(b.validate(4, 7).is_err());
        let shared = IcvBundle {
            vectors: vec![vec![0.0; 8]],
            alphas: vec![1.0],
            shared: true,
        };
        shared.validate(4, 8).unwrap();
        assert_eq!(shared.slot(3), 0);
        let mut bad = IcvBundle::<f64>::zeros(2, 2);
        bad.alphas[1] = f64::NAN;
        assert!(matches!(bad.validate(2, 2), Err(Error::NonFinite)));
    }

    #[test]
    fn shift_folds_gate() {
        let b = IcvBundle {
            vectors: vec![vec![1.0, -2.0], vec![0.5, 0.5]],
            alphas: vec![0.5, 2.0],
            shared: false,
        };
        assert_eq!(b.shift(0), vec![0.5, -1.0]);
        assert_eq!(b.shift(1), vec![1.0, 1.0]);
        assert_eq!(b.n_trainable(), 6);
    }

    #[test]
    fn intervention_layer_checked() {
        let spec = InterventionSpec::ReplaceLastToken {
            layer: 4,
            vector: vec![0.0f64; 8],
        };
        assert!(spec.validate(4, 8).is_err());
        let spec = InterventionSpec::AddLastToken {
            layer: 3,
            vector: vec![0.0f64; 8],
        };
        spec.validate(4, 8).unwrap();
    }
}

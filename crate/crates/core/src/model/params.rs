use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Arc<Tensor<T>>,
    pub ln1_bias: Arc<Tensor<T>>,
    pub w_q: Arc<Tensor<T>>,
    pub b_q: Arc<Tensor<T>>,
    pub w_k: Arc<Tensor<T>>,
    pub b_k: Arc<Tensor<T>>,
    pub w_v: Arc<Tensor<T>>,
    pub b_v: Arc<Tensor<T>>,
    pub w_o: Arc<Tensor<T>>,
    pub b_o: Arc<Tensor<T>>,
    pub ln2_gain: Arc<Tensor<T>>,
    pub ln2_bias: Arc<Tensor<T>>,
    pub w_in: Arc<Tensor<T>>,
    pub b_in: Arc<Tensor<T>>,
    pub w_out: Arc<Tensor<T>>,
    pub b_out: Arc<Tensor<T>>,
}

const LAYER_NAMES: [&str; 16] = [
    "ln1_gain", "ln1_bias", "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o", "ln2_gain",
    "ln2_bias", "w_in", "b_in", "w_out", "b_out",
];

impl<T> LayerParams<T> {
    fn fields(&self) -> [&Arc<Tensor<T>>; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_in,
            &self.b_in,
            &self.w_out,
            &self.b_out,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Arc<Tensor<T>>; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }
}

/// Full weight set of the toy transformer. Weight matrices are stored
/// `in x out`, so a layer computes `x * W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T> {
    pub config: ModelConfig,
    pub tok_emb: Arc<Tensor<T>>,
    pub pos_emb: Arc<Tensor<T>>,
    pub layers: Vec<LayerParams<T>>,
    pub ln_f_gain: Arc<Tensor<T>>,
    pub ln_f_bias: Arc<Tensor<T>>,
    /// Unembedding `E`, `d x N`.
    pub unembed: Arc<Tensor<T>>,
}

/// Deterministic initialisation: weights ~ N(0, 0.02^2), biases 0, gains 1.
pub fn init_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Parameters<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut randn = |r: usize, c: usize| -> Arc<Tensor<T>> {
        let data = (0..r * c)
            .map(|_| T::lit(normal.sample(&mut rng)))
            .collect();
        Arc::new(Tensor::from_vec(r, c, data).expect("shape"))
    };
    let (d, m, n) = (config.d_model, config.d_mlp, config.vocab_size);
    let zeros = |c: usize| Arc::new(Tensor::<T>::zeros(1, c));
    let ones = |c: usize| Arc::new(Tensor::<T>::filled(1, c, T::one()));
    let tok_emb = randn(n, d);
    let pos_emb = randn(config.max_seq_len, d);
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            ln1_gain: ones(d),
            ln1_bias: zeros(d),
            w_q: randn(d, d),
            b_q: zeros(d),
            w_k: randn(d, d),
            b_k: zeros(d),
            w_v: randn(d, d),
            b_v: zeros(d),
            w_o: randn(d, d),
            b_o: zeros(d),
            ln2_gain: ones(d),
            ln2_bias: zeros(d),
            w_in: randn(d, m),
            b_in: zeros(m),
            w_out: randn(m, d),
            b_out: zeros(d),
        })
        .collect();
    let unembed = randn(d, n);
    Ok(Parameters {
        config: config.clone(),
        tok_emb,
        pos_emb,
        layers,
        ln_f_gain: ones(d),
        ln_f_bias: zeros(d),
        unembed,
    })
}

impl<T: Scalar> Parameters<T> {
    /// Named tensors in canonical (checkpoint and optimizer) order.
    pub fn named(&self) -> Vec<(String, &Arc<Tensor<T>>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_NAMES.iter().zip(layer.fields()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("ln_f_gain".to_string(), &self.ln_f_gain));
        out.push(("ln_f_bias".to_string(), &self.ln_f_bias));
        out.push(("unembed".to_string(), &self.unembed));
        out
    }

    /// Mutable handles in the same order as [`Parameters::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Arc<Tensor<T>>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.ln_f_gain);
        out.push(&mut self.ln_f_bias);
        out.push(&mut self.unembed);
        out
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuilds parameters from tensors in canonical order.
    pub fn from_named(config: &ModelConfig, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut params = init_model::<T>(config, 0)?;
        let expected: Vec<(String, [usize; 2])> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(shape_err(
                "parameters",
                format!("expected {} tensors, found {}", expected.len(), tensors.len()),
            ));
        }
        for (slot, ((name, shape), (got_name, t))) in params
            .tensors_mut()
            .into_iter()
            .zip(expected.iter().zip(tensors))
        {
            if *name != got_name || *shape != t.shape() {
                return Err(shape_err(
                    "parameters",
                    format!("{got_name} {:?} where {name} {:?} expected", t.shape(), shape),
                ));
            }
            *slot = Arc::new(t);
        }
        Ok(params)
    }

    /// SHA-256 over the config and every value's bit pattern.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serialises"));
        let mut buf = Vec::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            buf.clear();
            for &x in t.data() {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        let c = |t: &Arc<Tensor<T>>| Arc::new(t.cast::<U>());
        Parameters {
            config: self.config.clone(),
            tok_emb: c(&self.tok_emb),
            pos_emb: c(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: c(&l.ln1_gain),
                    ln1_bias: c(&l.ln1_bias),
                    w_q: c(&l.w_q),
                    b_q: c(&l.b_q),
                    w_k: c(&l.w_k),
                    b_k: c(&l.b_k),
                    w_v: c(&l.w_v),
                    b_v: c(&l.b_v),
                    w_o: c(&l.w_o),
                    b_o: c(&l.b_o),
                    ln2_gain: c(&l.ln2_gain),
                    ln2_bias: c(&l.ln2_bias),
                    w_in: c(&l.w_in),
                    b_in: c(&l.b_in),
                    w_out: c(&l.w_out),
                    b_out: c(&l.b_out),
                })
                .collect(),
            ln_f_gain: c(&self.ln_f_gain),
            ln_f_bias: c(&self.ln_f_bias),
            unembed: c(&self.unembed),
        }
    }

    pub(crate) fn on_tape<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> ParamVars<'t, T> {
        let v = |t: &Arc<Tensor<T>>| tape.leaf_shared(Arc::clone(t), trainable);
        ParamVars {
            tok_emb: v(&self.tok_emb),
            pos_emb: v(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    ln1_gain: v(&l.ln1_gain),
                    ln1_bias: v(&l.ln1_bias),
                    w_q: v(&l.w_q),
                    b_q: v(&l.b_q),
                    w_k: v(&l.w_k),
                    b_k: v(&l.b_k),
                    w_v: v(&l.w_v),
                    b_v: v(&l.b_v),
                    w_o: v(&l.w_o),
                    b_o: v(&l.b_o),
                    ln2_gain: v(&l.ln2_gain),
                    ln2_bias: v(&l.ln2_bias),
                    w_in: v(&l.w_in),
                    b_in: v(&l.b_in),
                    w_out: v(&l.w_out),
                    b_out: v(&l.b_out),
                })
                .collect(),
            ln_f_gain: v(&self.ln_f_gain),
            ln_f_bias: v(&self.ln_f_bias),
            unembed: v(&self.unembed),
        }
    }
}

pub(crate) struct LayerVars<'t, T: Scalar> {
    pub ln1_gain: Var<'t, T>,
    pub ln1_bias: Var<'t, T>,
    pub w_q: Var<'t, T>,
    pub b_q: Var<'t, T>,
    pub w_k: Var<'t, T>,
    pub b_k: Var<'t, T>,
    pub w_v: Var<'t, T>,
    pub b_v: Var<'t, T>,
    pub w_o: Var<'t, T>,
    pub b_o: Var<'t, T>,
    pub ln2_gain: Var<'t, T>,
    pub ln2_bias: Var<'t, T>,
    pub w_in: Var<'t, T>,
    pub b_in: Var<'t, T>,
    pub w_out: Var<'t, T>,
    pub b_out: Var<'t, T>,
}

impl<'t, T: Scalar> LayerVars<'t, T> {
    fn all(&self) -> [Var<'t, T>; 16] {
        [
            self.ln1_gain,
            self.ln1_bias,
            self.w_q,
            self.b_q,
            self.w_k,
            self.b_k,
            self.w_v,
            self.b_v,
            self.w_o,
            self.b_o,
            self.ln2_gain,
            self.ln2_bias,
            self.w_in,
            self.b_in,
            self.w_out,
            self.b_out,
        ]
    }
}

pub(crate) struct ParamVars<'t, T: Scalar> {
    pub tok_emb: Var<'t, T>,
    pub pos_emb: Var<'t, T>,
    pub layers: Vec<LayerVars<'t, T>>,
    pub ln_f_gain: Var<'t, T>,
    pub ln_f_bias: Var<'t, T>,
    pub unembed: Var<'t, T>,
}

impl<'t, T: Scalar> ParamVars<'t, T> {
    /// Variables in the canonical order of [`Parameters::named`].
    pub fn all(&self) -> Vec<Var<'t, T>> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend(l.all());
        }
        out.extend([self.ln_f_gain, self.ln_f_bias, self.unembed]);
        out
    }
}

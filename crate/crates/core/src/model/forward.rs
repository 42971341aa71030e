use std::collections::BTreeMap;
use std::sync::Arc;

use super::params::{ParamVars, Parameters};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::flops::{self, Component};
use crate::intervention::InterventionSpec;
use crate::scalar::Scalar;
use crate::tensor::{norm, Tensor};

/// Tape-level form of an intervention; vectors are already scaled.
pub(crate) enum TapeShift<'t, T: Scalar> {
    None,
    /// One shift per bundle slot (a single slot when shared).
    PerLayer(Vec<Var<'t, T>>),
    ReplaceLast { layer: usize, vector: Var<'t, T> },
    AddLast { layer: usize, vector: Var<'t, T> },
    AllTokens {
        vectors: Vec<Var<'t, T>>,
        renormalize: bool,
    },
}

/// Low-rank update of the unembedding: `logits += (h * mask) A B`.
pub(crate) struct HeadAdapter<'t, T: Scalar> {
    pub a: Var<'t, T>,
    pub b: Var<'t, T>,
    pub dropout_mask: Option<Var<'t, T>>,
}

/// Per-layer attention internals of one forward pass.
#[derive(Debug, Clone)]
pub struct AttentionTrace<T> {
    /// Projected queries, keys and values (`T x d`, biases included).
    pub q: Arc<Tensor<T>>,
    pub k: Arc<Tensor<T>>,
    pub v: Arc<Tensor<T>>,
    /// Per-head attention mix before the output projection (`T x d`).
    pub mix: Arc<Tensor<T>>,
    /// `heads x T x T` attention probabilities (zero above the diagonal).
    pub probs: Vec<T>,
}

pub(crate) struct GraphOutput<'t, T: Scalar> {
    pub logits: Var<'t, T>,
    /// Post-block residual stream per layer, after that layer's intervention.
    pub residuals: Vec<Var<'t, T>>,
    pub attention: Vec<AttentionTrace<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Length of the prompt; last-token interventions act at `prompt_len - 1`.
    /// Defaults to the full sequence.
    pub prompt_len: Option<usize>,
    /// `(layer, position)` pairs whose post-block residual is returned.
    pub capture: Vec<(usize, usize)>,
    pub attention: bool,
}

impl ForwardOptions {
    pub fn capture(capture: Vec<(usize, usize)>) -> Self {
        Self {
            capture,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `seq_len x N`.
    pub logits: Tensor<T>,
    pub captured: BTreeMap<(usize, usize), Vec<T>>,
    pub attention: Option<Vec<AttentionTrace<T>>>,
}

pub(crate) fn check_tokens<T: Scalar>(params: &Parameters<T>, tokens: &[usize]) -> Result<()> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(Error::Invalid("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::OutOfRange {
            what: "sequence length",
            index: tokens.len(),
            limit: cfg.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::OutOfRange {
            what: "token id",
            index: bad,
            limit: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Builds the forward graph on `tape`. Shared by inference and training.
pub(crate) fn run_graph<'t, T: Scalar>(
    vars: &ParamVars<'t, T>,
    params: &Parameters<T>,
    tokens: &[usize],
    prompt_len: usize,
    shift: &TapeShift<'t, T>,
    adapter: Option<&HeadAdapter<'t, T>>,
    keep_attention: bool,
) -> Result<GraphOutput<'t, T>> {
    check_tokens(params, tokens)?;
    let cfg = &params.config;
    let t_len = tokens.len();
    if prompt_len == 0 || prompt_len > t_len {
        return Err(Error::OutOfRange {
            what: "prompt length",
            index: prompt_len,
            limit: t_len,
        });
    }
    let last = prompt_len - 1;
    let scale = T::one() / T::lit(cfg.head_dim() as f64).sqrt();
    let slopes: Vec<T> = cfg.head_slopes().into_iter().map(T::lit).collect();

    let mut h = {
        let _s = flops::scope(Component::Embeddings);
        let tok = vars.tok_emb.embedding(tokens)?;
        let pos = vars.pos_emb.slice_rows(0, t_len)?;
        tok.add(pos)?
    };

    let mut residuals = Vec::with_capacity(cfg.n_layers);
    let mut attention = Vec::new();
    for (l, lv) in vars.layers.iter().enumerate() {
        {
            let _s = flops::scope(Component::Projections);
            let x = h.layer_norm(lv.ln1_gain, lv.ln1_bias)?;
            let q = x.matmul(lv.w_q)?.add_row(lv.b_q)?;
            let k = x.matmul(lv.w_k)?.add_row(lv.b_k)?;
            let v = x.matmul(lv.w_v)?.add_row(lv.b_v)?;
            let (mix, probs) = q.causal_attention(k, v, cfg.n_heads, scale, &slopes)?;
            if keep_attention {
                attention.push(AttentionTrace {
                    q: q.value(),
                    k: k.value(),
                    v: v.value(),
                    mix: mix.value(),
                    probs,
                });
            }
            let out = mix.matmul(lv.w_o)?.add_row(lv.b_o)?;
            h = h.add(out)?;
        }
        {
            let _s = flops::scope(Component::Mlp);
            let x = h.layer_norm(lv.ln2_gain, lv.ln2_bias)?;
            let m = x.matmul(lv.w_in)?.add_row(lv.b_in)?.gelu();
            let out = m.matmul(lv.w_out)?.add_row(lv.b_out)?;
            h = h.add(out)?;
        }
        {
            let _s = flops::scope(Component::InterventionAdds);
            h = match shift {
                TapeShift::None => h,
                TapeShift::PerLayer(shifts) => {
                    let s = if shifts.len() == 1 { shifts[0] } else { shifts[l] };
                    h.shift_rows(s, false)?
                }
                TapeShift::ReplaceLast { layer, vector } if *layer == l => {
                    h.set_row(last, *vector)?
                }
                TapeShift::AddLast { layer, vector } if *layer == l => {
                    h.add_to_row(last, *vector)?
                }
                TapeShift::AllTokens {
                    vectors,
                    renormalize,
                } => h.shift_rows(vectors[l], *renormalize)?,
                _ => h,
            };
        }
        residuals.push(h);
    }

    let hf = h.layer_norm(vars.ln_f_gain, vars.ln_f_bias)?;
    let logits = {
        let _s = flops::scope(Component::Unembedding);
        let mut logits = hf.matmul(vars.unembed)?;
        if let Some(ad) = adapter {
            let x = match ad.dropout_mask {
                Some(mask) => hf.mul(mask)?,
                None => hf,
            };
            logits = logits.add(x.matmul(ad.a)?.matmul(ad.b)?)?;
        }
        logits
    };
    Ok(GraphOutput {
        logits,
        residuals,
        attention,
    })
}

/// Converts a declarative intervention into constants on `tape`.
pub(crate) fn tape_shift<'t, T: Scalar>(
    tape: &'t Tape<T>,
    spec: &InterventionSpec<T>,
) -> TapeShift<'t, T> {
    let row = |v: Vec<T>| tape.constant(Tensor::row_vector(v));
    match spec {
        InterventionSpec::None => TapeShift::None,
        InterventionSpec::AddPerLayer(b) => {
            TapeShift::PerLayer((0..b.vectors.len()).map(|s| row(b.shift(s))).collect())
        }
        InterventionSpec::ReplaceLastToken { layer, vector } => TapeShift::ReplaceLast {
            layer: *layer,
            vector: row(vector.clone()),
        },
        InterventionSpec::AddLastToken { layer, vector } => TapeShift::AddLast {
            layer: *layer,
            vector: row(vector.clone()),
        },
        InterventionSpec::AddAllTokens {
            vectors,
            strength,
            renormalize,
        } => TapeShift::AllTokens {
            vectors: vectors
                .iter()
                .map(|v| {
                    let n = norm(v);
                    let scaled = if n > T::zero() {
                        v.iter().map(|&x| x / n * *strength).collect()
                    } else {
                        vec![T::zero(); v.len()]
                    };
                    row(scaled)
                })
                .collect(),
            renormalize: *renormalize,
        },
        InterventionSpec::LowRankHead { .. } => TapeShift::None,
    }
}

/// Tape constants for a `LowRankHead` intervention.
pub(crate) fn tape_adapter<'t, T: Scalar>(
    tape: &'t Tape<T>,
    spec: &InterventionSpec<T>,
) -> Option<HeadAdapter<'t, T>> {
    match spec {
        InterventionSpec::LowRankHead { a, b } => Some(HeadAdapter {
            a: tape.constant(a.clone()),
            b: tape.constant(b.clone()),
            dropout_mask: None,
        }),
        _ => None,
    }
}

fn check_intervention<T: Scalar>(params: &Parameters<T>, spec: &InterventionSpec<T>) -> Result<()> {
    let cfg = &params.config;
    spec.validate(cfg.n_layers, cfg.d_model)?;
    spec.validate_head(cfg.vocab_size)
}

/// Causal forward pass with an optional intervention and state captures.
///
/// Captured states are the post-block residual stream, taken after any
/// intervention at that layer.
pub fn forward<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[usize],
    intervention: &InterventionSpec<T>,
    options: &ForwardOptions,
) -> Result<ForwardOutput<T>> {
    let cfg = &params.config;
    check_intervention(params, intervention)?;
    for &(layer, pos) in &options.capture {
        if layer >= cfg.n_layers {
            return Err(Error::OutOfRange {
                what: "capture layer",
                index: layer,
                limit: cfg.n_layers,
            });
        }
        if pos >= tokens.len() {
            return Err(Error::OutOfRange {
                what: "capture position",
                index: pos,
                limit: tokens.len(),
            });
        }
    }
    let tape = Tape::new();
    let vars = params.on_tape(&tape, false);
    let shift = tape_shift(&tape, intervention);
    let adapter = tape_adapter(&tape, intervention);
    let prompt_len = options.prompt_len.unwrap_or(tokens.len());
    let out = run_graph(
        &vars,
        params,
        tokens,
        prompt_len,
        &shift,
        adapter.as_ref(),
        options.attention,
    )?;
    let mut captured = BTreeMap::new();
    for &(layer, pos) in &options.capture {
        let state = out.residuals[layer].value();
        captured.insert((layer, pos), state.row(pos).to_vec());
    }
    let logits = (*out.logits.value()).clone();
    Ok(ForwardOutput {
        logits,
        captured,
        attention: options.attention.then_some(out.attention),
    })
}

/// Post-block residual streams (`T x d` per layer) of a plain forward pass.
pub fn residual_streams<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[usize],
    intervention: &InterventionSpec<T>,
    prompt_len: Option<usize>,
) -> Result<(Tensor<T>, Vec<Arc<Tensor<T>>>)> {
    check_intervention(params, intervention)?;
    let tape = Tape::new();
    let vars = params.on_tape(&tape, false);
    let shift = tape_shift(&tape, intervention);
    let adapter = tape_adapter(&tape, intervention);
    let out = run_graph(
        &vars,
        params,
        tokens,
        prompt_len.unwrap_or(tokens.len()),
        &shift,
        adapter.as_ref(),
        false,
    )?;
    let logits = (*out.logits.value()).clone();
    Ok((logits, out.residuals.iter().map(|r| r.value()).collect()))
}

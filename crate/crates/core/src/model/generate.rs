use serde::{Deserialize, Serialize};

use super::forward::{forward, ForwardOptions};
use super::params::Parameters;
use crate::error::{Error, Result};
use crate::intervention::InterventionSpec;
use crate::scalar::Scalar;
use crate::tensor::{argmax, log_softmax};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub max_new: usize,
    pub beams: usize,
    pub length_penalty: f64,
    pub min_new: usize,
    /// Token that terminates an answer; it is not part of the output.
    pub stop_token: Option<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new: 5,
            beams: 3,
            length_penalty: 0.0,
            min_new: 0,
            stop_token: None,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(stop_token: Option<usize>) -> Self {
        Self {
            beams: 1,
            stop_token,
            ..Self::default()
        }
    }
}

fn next_log_probs<T: Scalar>(
    params: &Parameters<T>,
    seq: &[usize],
    prompt_len: usize,
    intervention: &InterventionSpec<T>,
) -> Result<Vec<T>> {
    let opts = ForwardOptions {
        prompt_len: Some(prompt_len),
        ..ForwardOptions::default()
    };
    let out = forward(params, seq, intervention, &opts)?;
    Ok(log_softmax(out.logits.row(seq.len() - 1)))
}

/// Decodes an answer after `prompt`. Greedy when `beams == 1`, beam search
/// otherwise; equal scores are broken towards lower token ids.
pub fn generate<T: Scalar>(
    params: &Parameters<T>,
    prompt: &[usize],
    intervention: &InterventionSpec<T>,
    cfg: &DecodeConfig,
) -> Result<Vec<usize>> {
    let max_len = params.config.max_seq_len;
    if prompt.is_empty() {
        return Err(Error::Invalid("empty prompt".into()));
    }
    if prompt.len() > max_len {
        return Err(Error::OutOfRange {
            what: "prompt length",
            index: prompt.len(),
            limit: max_len,
        });
    }
    if cfg.beams == 0 {
        return Err(Error::Config("decode.beams must be at least 1".into()));
    }
    let budget = cfg.max_new.min(max_len - prompt.len());
    if cfg.beams == 1 {
        greedy(params, prompt, intervention, cfg, budget)
    } else {
        beam_search(params, prompt, intervention, cfg, budget)
    }
}

fn greedy<T: Scalar>(
    params: &Parameters<T>,
    prompt: &[usize],
    intervention: &InterventionSpec<T>,
    cfg: &DecodeConfig,
    budget: usize,
) -> Result<Vec<usize>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < budget {
        let mut lp = next_log_probs(params, &seq, prompt.len(), intervention)?;
        if out.len() < cfg.min_new {
            if let Some(stop) = cfg.stop_token {
                lp[stop] = T::neg_infinity();
            }
        }
        let tok = argmax(&lp);
        if Some(tok) == cfg.stop_token {
            break;
        }
        out.push(tok);
        seq.push(tok);
    }
    Ok(out)
}

#[derive(Clone)]
struct Beam {
    tokens: Vec<usize>,
    log_prob: f64,
}

fn penalised(log_prob: f64, len: usize, penalty: f64) -> f64 {
    if penalty == 0.0 {
        log_prob
    } else {
        log_prob / (len.max(1) as f64).powf(penalty)
    }
}

fn beam_order(a: &(f64, Vec<usize>), b: &(f64, Vec<usize>)) -> std::cmp::Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then_with(|| a.1.cmp(&b.1))
}

fn beam_search<T: Scalar>(
    params: &Parameters<T>,
    prompt: &[usize],
    intervention: &InterventionSpec<T>,
    cfg: &DecodeConfig,
    budget: usize,
) -> Result<Vec<usize>> {
    let mut alive = vec![Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    // finished hypotheses: (score, tokens)
    let mut finished: Vec<(f64, Vec<usize>)> = Vec::new();
    for step in 0..budget {
        let mut candidates: Vec<(f64, Vec<usize>, bool)> = Vec::new();
        for beam in &alive {
            let mut seq = prompt.to_vec();
            seq.extend(&beam.tokens);
            let lp = next_log_probs(params, &seq, prompt.len(), intervention)?;
            for (tok, &l) in lp.iter().enumerate() {
                let is_stop = Some(tok) == cfg.stop_token;
                if is_stop && step < cfg.min_new {
                    continue;
                }
                let total = beam.log_prob + l.to_f64_lossy();
                let mut tokens = beam.tokens.clone();
                if !is_stop {
                    tokens.push(tok);
                }
                candidates.push((total, tokens, is_stop));
            }
        }
        candidates.sort_by(|a, b| {
            beam_order(&(a.0, a.1.clone()), &(b.0, b.1.clone())).then(a.2.cmp(&b.2))
        });
        let mut next = Vec::new();
        for (lp, tokens, is_stop) in candidates {
            if next.len() >= cfg.beams {
                break;
            }
            if is_stop {
                let len = tokens.len();
                finished.push((penalised(lp, len, cfg.length_penalty), tokens));
            } else {
                next.push(Beam {
                    tokens,
                    log_prob: lp,
                });
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
        // Stop once no live beam can beat the best finished hypothesis.
        if cfg.length_penalty == 0.0 {
            if let Some(best) = finished.iter().map(|f| f.0).reduce(f64::max) {
                if alive.iter().all(|b| b.log_prob < best) {
                    break;
                }
            }
        }
    }
    for b in alive {
        let len = b.tokens.len();
        finished.push((penalised(b.log_prob, len, cfg.length_penalty), b.tokens));
    }
    finished.sort_by(beam_order);
    Ok(finished.into_iter().next().map(|f| f.1).unwrap_or_default())
}

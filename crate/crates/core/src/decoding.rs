//! Greedy and beam decoding over the closed vocabulary.

use std::cmp::Ordering;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::{SeqAttrModel, VisualInput};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vocab::{sequence_to_labels, AttributeVocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    Beam(usize),
}

impl FromStr for DecodeStrategy {
    type Err = Error;

    /// `greedy` or `beam:<width>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "greedy" {
            return Ok(Self::Greedy);
        }
        if let Some(w) = s.strip_prefix("beam:") {
            let w: usize = w.parse().map_err(|_| Error::Invalid(format!("bad beam width in {s:?}")))?;
            if w == 0 {
                return Err(Error::Invalid("beam width must be at least 1".into()));
            }
            return Ok(Self::Beam(w));
        }
        Err(Error::Invalid(format!("unknown decode strategy {s:?}")))
    }
}

impl std::fmt::Display for DecodeStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Greedy => write!(f, "greedy"),
            Self::Beam(w) => write!(f, "beam:{w}"),
        }
    }
}

/// A partial or finished sequence and its summed step log-probs.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<usize>,
    pub cumulative_logprob: f64,
    pub step_logprobs: Vec<f64>,
    pub finished: bool,
}

/// Last-row log-probs with BOS and PAD removed and the rest renormalized.
/// Excluded entries are `-inf`.
pub fn candidate_log_probs(row: &[f64], vocab: &AttributeVocabulary) -> Vec<f64> {
    let allowed = |t: usize| t != vocab.bos() && t != vocab.pad();
    let max = row
        .iter()
        .enumerate()
        .filter(|&(t, _)| allowed(t))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + row
            .iter()
            .enumerate()
            .filter(|&(t, _)| allowed(t))
            .map(|(_, &v)| (v - max).exp())
            .sum::<f64>()
            .ln();
    row.iter()
        .enumerate()
        .map(|(t, &v)| if allowed(t) { v - lse } else { f64::NEG_INFINITY })
        .collect()
}

fn step_distribution(model: &SeqAttrModel, visual: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
    let out = model.decode_forward(prefix, visual)?;
    let (rows, _) = out.log_probs.dims2()?;
    Ok(candidate_log_probs(out.log_probs.row(rows - 1), model.vocab()))
}

fn clamp_len(model: &SeqAttrModel, max_len: usize) -> usize {
    max_len.min(model.max_len())
}

/// Argmax decoding from BOS until EOS or `max_len` generated tokens.
/// Ties go to the lowest index. `visual` is the encoded token matrix.
pub fn greedy_decode(model: &SeqAttrModel, visual: &Tensor, max_len: usize) -> Result<BeamHypothesis> {
    let vocab = model.vocab();
    let max_len = clamp_len(model, max_len);
    let mut hyp = BeamHypothesis {
        tokens: vec![vocab.bos()],
        cumulative_logprob: 0.0,
        step_logprobs: Vec::new(),
        finished: false,
    };
    while hyp.step_logprobs.len() < max_len {
        let lp = step_distribution(model, visual, &hyp.tokens)?;
        let mut best = 0;
        for (t, &v) in lp.iter().enumerate() {
            if v > lp[best] {
                best = t;
            }
        }
        hyp.tokens.push(best);
        hyp.cumulative_logprob += lp[best];
        hyp.step_logprobs.push(lp[best]);
        if best == vocab.eos() {
            hyp.finished = true;
            break;
        }
    }
    Ok(hyp)
}

/// Higher score first, then lexicographically smaller tokens.
fn rank(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.cumulative_logprob
        .partial_cmp(&a.cumulative_logprob)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search with summed log-prob scores. Finished hypotheses stay in the
/// beam and compete with live ones.
pub fn beam_decode(model: &SeqAttrModel, visual: &Tensor, width: usize, max_len: usize) -> Result<BeamHypothesis> {
    if width == 0 {
        return Err(Error::Invalid("beam width must be at least 1".into()));
    }
    let vocab = model.vocab();
    let max_len = clamp_len(model, max_len);
    let mut beam = vec![BeamHypothesis {
        tokens: vec![vocab.bos()],
        cumulative_logprob: 0.0,
        step_logprobs: Vec::new(),
        finished: false,
    }];
    for _ in 0..max_len {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let mut next = Vec::new();
        for h in &beam {
            if h.finished {
                next.push(h.clone());
                continue;
            }
            let lp = step_distribution(model, visual, &h.tokens)?;
            for (t, &v) in lp.iter().enumerate() {
                if v == f64::NEG_INFINITY {
                    continue;
                }
                let mut c = h.clone();
                c.tokens.push(t);
                c.cumulative_logprob += v;
                c.step_logprobs.push(v);
                c.finished = t == vocab.eos();
                next.push(c);
            }
        }
        next.sort_by(rank);
        next.truncate(width);
        beam = next;
    }
    let best_finished = beam.iter().filter(|h| h.finished).min_by(|a, b| rank(a, b));
    Ok(best_finished
        .or_else(|| beam.iter().min_by(|a, b| rank(a, b)))
        .expect("beam is never empty")
        .clone())
}

/// Diagnostics for one generation step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub prefix: Vec<usize>,
    pub chosen: usize,
    pub chosen_log_prob: f64,
    /// Best candidates as `(token, log-prob)`.
    pub top: Vec<(usize, f64)>,
    /// Last query row per `[layer][head]`, over the prefix.
    pub self_attention: Vec<Vec<Vec<f64>>>,
    /// Last query row per `[layer][head]`, over visual tokens.
    pub cross_attention: Vec<Vec<Vec<f64>>>,
}

/// Re-runs each prefix of `tokens` to record attention and top-k classes.
pub fn trace_sequence(model: &SeqAttrModel, visual: &Tensor, tokens: &[usize], top_k: usize) -> Result<Vec<StepTrace>> {
    let mut steps = Vec::with_capacity(tokens.len().saturating_sub(1));
    for k in 1..tokens.len() {
        let prefix = &tokens[..k];
        let out = model.decode_forward(prefix, visual)?;
        let last = k - 1;
        let lp = candidate_log_probs(out.log_probs.row(last), model.vocab());
        let mut ranked: Vec<(usize, f64)> = lp
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        ranked.truncate(top_k);
        let rows = |maps: &Vec<Vec<Tensor>>| -> Vec<Vec<Vec<f64>>> {
            maps.iter()
                .map(|heads| heads.iter().map(|m| m.row(last).to_vec()).collect())
                .collect()
        };
        steps.push(StepTrace {
            prefix: prefix.to_vec(),
            chosen: tokens[k],
            chosen_log_prob: lp[tokens[k]],
            top: ranked,
            self_attention: rows(&out.self_attention),
            cross_attention: rows(&out.cross_attention),
        });
    }
    Ok(steps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<u8>,
    pub tokens: Vec<usize>,
    pub score: f64,
    /// Log-prob of the step that first emitted each attribute.
    pub attribute_log_probs: Vec<Option<f64>>,
    pub trace: Option<Vec<StepTrace>>,
}

pub fn decode(model: &SeqAttrModel, visual: &Tensor, strategy: DecodeStrategy) -> Result<BeamHypothesis> {
    let max_len = model.vocab().len() + 1;
    match strategy {
        DecodeStrategy::Greedy => greedy_decode(model, visual, max_len),
        DecodeStrategy::Beam(w) => beam_decode(model, visual, w, max_len),
    }
}

/// Decodes and maps the sequence to a multi-hot vector. Repeated attributes
/// are merged.
pub fn predict_labels(
    model: &SeqAttrModel,
    input: &VisualInput,
    strategy: DecodeStrategy,
    with_trace: bool,
) -> Result<Prediction> {
    let visual = model.encode_visual_value(input)?;
    let hyp = decode(model, &visual, strategy)?;
    let vocab = model.vocab();
    let labels = sequence_to_labels(&hyp.tokens, vocab);
    let mut attribute_log_probs = vec![None; vocab.len()];
    for (&t, &lp) in hyp.tokens[1..].iter().zip(&hyp.step_logprobs) {
        if t == vocab.eos() {
            break;
        }
        if vocab.is_attribute(t) && attribute_log_probs[t].is_none() {
            attribute_log_probs[t] = Some(lp);
        }
    }
    let trace = if with_trace {
        Some(trace_sequence(model, &visual, &hyp.tokens, 5)?)
    } else {
        None
    };
    Ok(Prediction {
        labels,
        tokens: hyp.tokens,
        score: hyp.cumulative_logprob,
        attribute_log_probs,
        trace,
    })
}

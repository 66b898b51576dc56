//! Greedy and beam-search generation.
//!
//! Both decoders work against a [`StepScorer`], which maps target prefixes to
//! next-token log-probabilities. [`ModelScorer`] runs the transformer; tests
//! drive the same search code with hand-made tables.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{DecoderInput, Model, Selector};
use crate::scalar::Scalar;
use crate::styledata::{BOS, EOS, PAD};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    /// Exponent `α` of the `len^α` score normalizer; 0 disables it.
    pub length_penalty: f64,
    pub bos: usize,
    /// End-of-sequence token; `None` always runs to `max_len`.
    pub eos: Option<usize>,
    /// Tokens that are never emitted.
    pub banned: Vec<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 4,
            max_len: 24,
            length_penalty: 0.0,
            bos: BOS,
            eos: Some(EOS),
            banned: vec![PAD, BOS],
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        Self {
            beam_size: 1,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("decode max_len must be at least 1".into()));
        }
        Ok(())
    }

    fn normalized(&self, score: f64, generated: usize) -> f64 {
        if self.length_penalty > 0.0 {
            score / (generated.max(1) as f64).powf(self.length_penalty)
        } else {
            score
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// Generated tokens without BOS/EOS.
    pub tokens: Vec<usize>,
    /// Sum of log-probabilities of the generated tokens (EOS included),
    /// length-normalized when the config asks for it.
    pub score: f64,
    pub style_id: String,
}

/// Next-token log-probabilities for a set of prefixes.
pub trait StepScorer {
    /// `prefixes[i]` starts with BOS; returns one row of `V` log-probs each.
    fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Scores prefixes with a model for one fixed source sequence. The encoder
/// runs once; every call re-runs the decoder over the full prefixes.
pub struct ModelScorer<'m, T> {
    model: &'m Model<T>,
    memory: Tensor<T>,
}

impl<'m, T: Scalar> ModelScorer<'m, T> {
    pub fn new(model: &'m Model<T>, source: &[usize]) -> Result<Self> {
        if model.adapters().is_none() {
            return Err(Error::MissingAdapter("generation requires installed adapters".into()));
        }
        Ok(Self {
            model,
            memory: model.encode(source)?,
        })
    }
}

impl<T: Scalar> StepScorer for ModelScorer<'_, T> {
    fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mut f = self.model.forward(Selector::Base);
        let memory = f.tape.constant(self.memory.clone());
        let rows = self.memory.shape()[0];
        let inputs: Vec<DecoderInput> = prefixes
            .iter()
            .map(|p| DecoderInput {
                prefix: p,
                memory_start: 0,
                memory_len: rows,
            })
            .collect();
        let logits = f.decode_inputs(memory, &inputs)?;
        let logits = f.tape.value(logits);
        let mut out = Vec::with_capacity(prefixes.len());
        let mut end = 0;
        for p in prefixes {
            end += p.len();
            out.push(log_softmax(logits.row(end - 1)));
        }
        Ok(out)
    }
}

pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let xs: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.into_iter().map(|x| x - lse).collect()
}

/// Index of the best allowed token; ties go to the lowest id.
fn argmax(lp: &[f64], banned: &[usize]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in lp.iter().enumerate() {
        if banned.contains(&i) {
            continue;
        }
        if best.is_none_or(|b| v > lp[b]) {
            best = Some(i);
        }
    }
    best
}

fn finish(prefix: &[usize], eos: Option<usize>, score: f64, cfg: &DecodeConfig, style_id: &str) -> DecodeResult {
    let generated = prefix.len() - 1;
    let tokens = prefix[1..].iter().copied().filter(|&t| Some(t) != eos).collect();
    DecodeResult {
        tokens,
        score: cfg.normalized(score, generated),
        style_id: style_id.to_string(),
    }
}

/// Picks the highest-probability allowed token at each step.
pub fn greedy(scorer: &mut dyn StepScorer, cfg: &DecodeConfig, style_id: &str) -> Result<DecodeResult> {
    cfg.validate()?;
    let mut prefix = vec![cfg.bos];
    let mut score = 0.0;
    for _ in 0..cfg.max_len {
        let lp = scorer.log_probs(std::slice::from_ref(&prefix))?.remove(0);
        let next = argmax(&lp, &cfg.banned).ok_or_else(|| Error::Config("every token is banned".into()))?;
        score += lp[next];
        prefix.push(next);
        if Some(next) == cfg.eos {
            break;
        }
    }
    Ok(finish(&prefix, cfg.eos, score, cfg, style_id))
}

#[derive(Clone, Debug)]
struct Hyp {
    prefix: Vec<usize>,
    score: f64,
}

/// Higher score first, then shorter, then lexicographically smaller tokens.
fn rank(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.len().cmp(&b.1.len()))
        .then_with(|| a.1.cmp(b.1))
}

/// Standard beam search; hypotheses that emit EOS retire into a pool and the
/// best pooled hypothesis is returned.
pub fn beam_search(scorer: &mut dyn StepScorer, cfg: &DecodeConfig, style_id: &str) -> Result<DecodeResult> {
    cfg.validate()?;
    let k = cfg.beam_size;
    let mut live = vec![Hyp {
        prefix: vec![cfg.bos],
        score: 0.0,
    }];
    let mut done: Vec<Hyp> = Vec::new();
    for _ in 0..cfg.max_len {
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| h.prefix.clone()).collect();
        let rows = scorer.log_probs(&prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (b, lp) in rows.iter().enumerate() {
            for (tok, &v) in lp.iter().enumerate() {
                if !cfg.banned.contains(&tok) && v.is_finite() {
                    cands.push((live[b].score + v, b, tok));
                }
            }
        }
        if cands.is_empty() {
            return Err(Error::Config("every token is banned".into()));
        }
        cands.sort_by(|x, y| {
            let px = &live[x.1].prefix;
            let py = &live[y.1].prefix;
            x.0.partial_cmp(&y.0)
                .map(Ordering::reverse)
                .unwrap_or(Ordering::Equal)
                .then_with(|| px.cmp(py))
                .then(x.2.cmp(&y.2))
        });
        let mut next = Vec::with_capacity(k);
        for (score, b, tok) in cands {
            let mut prefix = live[b].prefix.clone();
            prefix.push(tok);
            if Some(tok) == cfg.eos {
                done.push(Hyp { prefix, score });
            } else {
                next.push(Hyp { prefix, score });
                if next.len() == k {
                    break;
                }
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
        // Log-probs are non-positive, so without normalization no live
        // hypothesis can overtake the best finished one.
        if cfg.length_penalty == 0.0 {
            let best_done = done.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if live.iter().all(|h| h.score <= best_done) {
                break;
            }
        }
    }
    done.extend(live);
    let best = done
        .iter()
        .min_by(|a, b| {
            rank(
                (cfg.normalized(a.score, a.prefix.len() - 1), &a.prefix),
                (cfg.normalized(b.score, b.prefix.len() - 1), &b.prefix),
            )
        })
        .expect("at least one hypothesis");
    Ok(finish(&best.prefix, cfg.eos, best.score, cfg, style_id))
}

/// Decodes one source with the model's installed adapters: greedy when
/// `beam_size == 1`, beam search otherwise.
pub fn generate<T: Scalar>(model: &Model<T>, source: &[usize], cfg: &DecodeConfig) -> Result<DecodeResult> {
    let style = model
        .adapters()
        .map(|a| a.style_id.clone())
        .ok_or_else(|| Error::MissingAdapter("generation requires installed adapters".into()))?;
    let mut scorer = ModelScorer::new(model, source)?;
    let cfg = DecodeConfig {
        max_len: cfg.max_len.min(model.config().max_len - 1),
        ..cfg.clone()
    };
    if cfg.beam_size == 1 {
        greedy(&mut scorer, &cfg, &style)
    } else {
        beam_search(&mut scorer, &cfg, &style)
    }
}

/// [`generate`] over many sources, in input order.
pub fn generate_all<T: Scalar>(
    model: &Model<T>,
    sources: &[Vec<usize>],
    cfg: &DecodeConfig,
) -> Result<Vec<DecodeResult>> {
    sources.iter().map(|s| generate(model, s, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Next-token logits that depend only on the step number.
    struct StepTable(Vec<Vec<f64>>);

    impl StepScorer for StepTable {
        fn log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes
                .iter()
                .map(|p| log_softmax(&self.0[(p.len() - 1).min(self.0.len() - 1)]))
                .collect())
        }
    }

    fn plain_cfg(beam: usize, max_len: usize) -> DecodeConfig {
        DecodeConfig {
            beam_size: beam,
            max_len,
            eos: None,
            banned: vec![],
            bos: 0,
            ..DecodeConfig::default()
        }
    }

    #[test]
    fn greedy_follows_argmax_trace() {
        let mut t = StepTable(vec![vec![0.1, 2.0, 0.3], vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 5.0]]);
        let r = greedy(&mut t, &plain_cfg(1, 3), "s0").unwrap();
        // ties at step two go to the lowest id
        assert_eq!(r.tokens, vec![1, 0, 2]);
    }

    #[test]
    fn greedy_stops_at_eos_and_never_emits_banned() {
        let mut t = StepTable(vec![vec![9.0, 0.0, 0.2, 0.5], vec![9.0, 0.0, 3.0, 0.5]]);
        let cfg = DecodeConfig {
            bos: 1,
            eos: Some(2),
            banned: vec![0, 1],
            beam_size: 1,
            max_len: 10,
            length_penalty: 0.0,
        };
        let r = greedy(&mut t, &cfg, "s1").unwrap();
        assert_eq!(r.tokens, vec![3]);
        assert_eq!(r.style_id, "s1");
    }

    #[test]
    fn zero_beam_rejected() {
        let mut t = StepTable(vec![vec![0.0; 3]]);
        assert!(beam_search(&mut t, &plain_cfg(0, 3), "s0").is_err());
    }
}

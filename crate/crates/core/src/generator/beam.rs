//! Beam search over any next-token distribution.

use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::{Error, Result};

/// Source of next-token log-probabilities given a generated prefix.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn eos(&self) -> u32;
    fn next_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub candidates: usize,
    /// Maximum generated tokens, `<eos>` included.
    pub max_len: usize,
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.candidates == 0 || self.candidates > self.beam_width {
            return Err(Error::InvalidConfig("beam search needs 1 <= candidates <= beam_width".into()));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidConfig("max_len must be positive".into()));
        }
        Ok(())
    }
}

/// A finished hypothesis. `tokens` ends with `<eos>` unless `forced`, in which
/// case it hit `max_len` first.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub forced: bool,
}

/// Descending score, then ascending lexicographic sequence.
pub fn rank_order<T: Ord>(a_lp: f64, a_tokens: &[T], b_lp: f64, b_tokens: &[T]) -> Ordering {
    b_lp.partial_cmp(&a_lp).unwrap_or(Ordering::Equal).then_with(|| a_tokens.cmp(b_tokens))
}

fn sort_hypotheses(h: &mut [Hypothesis]) {
    h.sort_by(|a, b| rank_order(a.log_prob, &a.tokens, b.log_prob, &b.tokens));
}

/// Top `candidates` hypotheses by total log-probability, best first.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &S, cfg: &BeamConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let eos = scorer.eos();
    let mut live: Vec<(Vec<u32>, f64)> = alloc::vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..cfg.max_len {
        let mut expansions: Vec<(Vec<u32>, f64)> = Vec::with_capacity(live.len() * scorer.vocab_size());
        for (prefix, lp) in &live {
            let next = scorer.next_log_probs(prefix)?;
            if next.len() != scorer.vocab_size() {
                return Err(Error::DimensionMismatch { expected: scorer.vocab_size(), got: next.len() });
            }
            for (tok, l) in next.iter().enumerate() {
                let mut t = prefix.clone();
                t.push(tok as u32);
                expansions.push((t, lp + l));
            }
        }
        expansions.sort_by(|a, b| rank_order(a.1, &a.0, b.1, &b.0));
        expansions.truncate(cfg.beam_width);
        live.clear();
        for (tokens, log_prob) in expansions {
            if tokens.last() == Some(&eos) {
                finished.push(Hypothesis { tokens, log_prob, forced: false });
            } else {
                live.push((tokens, log_prob));
            }
        }
        if live.is_empty() {
            break;
        }
        if finished.len() >= cfg.candidates {
            sort_hypotheses(&mut finished);
            let best_live = live.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
            if finished[cfg.candidates - 1].log_prob >= best_live {
                live.clear();
                break;
            }
        }
    }
    finished.extend(live.into_iter().map(|(tokens, log_prob)| Hypothesis { tokens, log_prob, forced: true }));
    sort_hypotheses(&mut finished);
    finished.truncate(cfg.candidates);
    Ok(finished)
}

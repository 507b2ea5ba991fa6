//! Entity coverage, corpus BLEU-4 and ROUGE-L.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::kg::EntityId;
use crate::linking::{AliasLexicon, NodeRef};
use crate::math;
use crate::prompting::DialogueSample;
use crate::text::split_pieces;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub generated_entities: BTreeSet<EntityId>,
    pub reference_entities: BTreeSet<EntityId>,
}

pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Entities linked in `text`.
pub fn linked_entities(text: &str, lexicon: &AliasLexicon) -> BTreeSet<EntityId> {
    lexicon
        .link(text)
        .into_iter()
        .filter_map(|s| match s.node {
            NodeRef::Entity(e) => Some(e),
            NodeRef::Relation(_) => None,
        })
        .collect()
}

/// Generated entities against sub-graph entities plus history-linked
/// entities. An empty generated set has precision 1; an empty reference set
/// has recall 1.
pub fn entity_coverage(response: &str, sample: &DialogueSample, lexicon: &AliasLexicon) -> CoverageReport {
    let generated = linked_entities(response, lexicon);
    let mut reference: BTreeSet<EntityId> = sample.sub_graph().entities().into_iter().collect();
    for u in sample.history() {
        reference.extend(linked_entities(&u.text, lexicon));
    }
    coverage_from_sets(generated, reference)
}

pub fn coverage_from_sets(generated: BTreeSet<EntityId>, reference: BTreeSet<EntityId>) -> CoverageReport {
    let hit = generated.intersection(&reference).count() as f64;
    let precision = if generated.is_empty() { 1.0 } else { hit / generated.len() as f64 };
    let recall = if reference.is_empty() { 1.0 } else { hit / reference.len() as f64 };
    CoverageReport {
        precision,
        recall,
        f1: harmonic_mean(precision, recall),
        generated_entities: generated,
        reference_entities: reference,
    }
}

/// Metric tokenization: the template splitter's pieces.
pub fn metric_tokens(text: &str) -> Vec<String> {
    split_pieces(text).iter().map(|p| String::from(p.text)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuBreakdown {
    /// Clipped matches and candidate counts for n = 1..4.
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hypothesis_length: usize,
    pub reference_length: usize,
    pub brevity_penalty: f64,
    pub score: f64,
}

impl BleuBreakdown {
    pub fn precision(&self, n: usize) -> f64 {
        if self.totals[n - 1] == 0 {
            0.0
        } else {
            self.matches[n - 1] as f64 / self.totals[n - 1] as f64
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU over pre-tokenized pairs, single reference, no smoothing.
pub fn corpus_bleu(references: &[Vec<String>], hypotheses: &[Vec<String>]) -> Result<BleuBreakdown> {
    if references.len() != hypotheses.len() || references.is_empty() {
        return Err(Error::LengthMismatch(references.len(), hypotheses.len()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (r, h) in references.iter().zip(hypotheses) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            let hc = ngram_counts(h, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len > ref_len {
        1.0
    } else {
        math::exp(1.0 - ref_len as f64 / hyp_len as f64)
    };
    let score = if matches.contains(&0) {
        0.0
    } else {
        let log_mean = (0..4).map(|k| math::ln(matches[k] as f64 / totals[k] as f64)).sum::<f64>() / 4.0;
        brevity_penalty * math::exp(log_mean)
    };
    Ok(BleuBreakdown { matches, totals, hypothesis_length: hyp_len, reference_length: ref_len, brevity_penalty, score })
}

/// Corpus BLEU-4 in `[0, 1]`.
pub fn bleu4<S: AsRef<str>>(references: &[S], hypotheses: &[S]) -> Result<f64> {
    let r: Vec<Vec<String>> = references.iter().map(|s| metric_tokens(s.as_ref())).collect();
    let h: Vec<Vec<String>> = hypotheses.iter().map(|s| metric_tokens(s.as_ref())).collect();
    Ok(corpus_bleu(&r, &h)?.score)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeL {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = alloc::vec![0usize; b.len() + 1];
    let mut cur = alloc::vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_scores(reference: &str, hypothesis: &str) -> RougeL {
    let r = metric_tokens(reference);
    let h = metric_tokens(hypothesis);
    if r.is_empty() && h.is_empty() {
        return RougeL { precision: 1.0, recall: 1.0, f1: 1.0 };
    }
    if r.is_empty() || h.is_empty() {
        return RougeL { precision: 0.0, recall: 0.0, f1: 0.0 };
    }
    let lcs = lcs_length(&r, &h) as f64;
    let precision = lcs / h.len() as f64;
    let recall = lcs / r.len() as f64;
    RougeL { precision, recall, f1: harmonic_mean(precision, recall) }
}

/// LCS F-measure with β = 1.
pub fn rouge_l(reference: &str, hypothesis: &str) -> f64 {
    rouge_l_scores(reference, hypothesis).f1
}

//! TransE embeddings and link-prediction evaluation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::kg::{EntityId, KnowledgeGraph, RelationId, Triple};
use crate::math;
use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransEConfig {
    pub d_kg: usize,
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl Default for TransEConfig {
    fn default() -> Self {
        Self { d_kg: 64, margin: 1.0, learning_rate: 0.01, epochs: 200, negatives_per_positive: 1, seed: 0 }
    }
}

impl TransEConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_kg == 0 {
            return Err(Error::InvalidConfig("d_kg must be positive".into()));
        }
        if !(self.margin > 0.0) {
            return Err(Error::InvalidConfig("margin must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Entity and relation vectors indexed by graph id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgEmbeddingTable {
    entities: Matrix,
    relations: Matrix,
}

impl KgEmbeddingTable {
    pub fn new(entities: Matrix, relations: Matrix) -> Result<Self> {
        if entities.cols() != relations.cols() || entities.cols() == 0 {
            return Err(Error::DimensionMismatch { expected: entities.cols(), got: relations.cols() });
        }
        Ok(Self { entities, relations })
    }

    pub fn zeros(entity_count: usize, relation_count: usize, d_kg: usize) -> Self {
        Self { entities: Matrix::zeros(entity_count, d_kg), relations: Matrix::zeros(relation_count, d_kg) }
    }

    pub fn d_kg(&self) -> usize {
        self.entities.cols()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.rows()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.rows()
    }

    pub fn entity(&self, id: EntityId) -> Result<&[f64]> {
        if id.index() >= self.entities.rows() {
            return Err(Error::MissingEmbedding(format!("entity #{}", id.0)));
        }
        Ok(self.entities.row(id.index()))
    }

    pub fn relation(&self, id: RelationId) -> Result<&[f64]> {
        if id.index() >= self.relations.rows() {
            return Err(Error::MissingEmbedding(format!("relation #{}", id.0)));
        }
        Ok(self.relations.row(id.index()))
    }

    pub fn entities(&self) -> &Matrix {
        &self.entities
    }

    pub fn relations(&self) -> &Matrix {
        &self.relations
    }

    /// Same shape with every value zero (the ablation that switches grounding off).
    pub fn zeroed(&self) -> Self {
        Self::zeros(self.entity_count(), self.relation_count(), self.d_kg())
    }

    /// Errors unless every graph entity and relation has a row.
    pub fn check_covers(&self, kg: &KnowledgeGraph) -> Result<()> {
        if self.entities.rows() < kg.entity_count() {
            let missing = EntityId(self.entities.rows() as u32);
            return Err(Error::MissingEmbedding(format!("entity `{}`", kg.entity_name(missing))));
        }
        if self.relations.rows() < kg.relation_count() {
            let missing = RelationId(self.relations.rows() as u32);
            return Err(Error::MissingEmbedding(format!("relation `{}`", kg.relation_name(missing))));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.entities.is_finite() && self.relations.is_finite()
    }

    pub fn max_entity_norm(&self) -> f64 {
        (0..self.entities.rows()).map(|i| math::l2_norm(self.entities.row(i))).fold(0.0, f64::max)
    }

    fn project_entities(&mut self) {
        for i in 0..self.entities.rows() {
            project_to_unit_ball(self.entities.row_mut(i));
        }
    }
}

fn project_to_unit_ball(v: &mut [f64]) {
    let n = math::l2_norm(v);
    if n > 1.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn normalize(v: &mut [f64]) {
    let n = math::l2_norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// `‖h + r − t‖₂`; lower is more plausible.
pub fn transe_score(h: &[f64], r: &[f64], t: &[f64]) -> Result<f64> {
    if h.len() != r.len() || h.len() != t.len() {
        return Err(Error::DimensionMismatch { expected: h.len(), got: if r.len() != h.len() { r.len() } else { t.len() } });
    }
    Ok(math::sqrt(h.iter().zip(r).zip(t).map(|((h, r), t)| (h + r - t) * (h + r - t)).sum()))
}

fn score_ids(table: &KgEmbeddingTable, h: usize, r: usize, t: usize) -> f64 {
    let (h, r, t) = (table.entities.row(h), table.relations.row(r), table.entities.row(t));
    math::sqrt(h.iter().zip(r).zip(t).map(|((h, r), t)| (h + r - t) * (h + r - t)).sum())
}

/// Which table row a gradient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Entity(EntityId),
    Relation(RelationId),
}

/// Hinge `max(0, γ + d(pos) − d(neg))` with its gradient by table row.
///
/// `pos` and `neg` share the relation. Rows touched twice appear twice.
pub fn margin_loss_grad(
    table: &KgEmbeddingTable,
    pos: &Triple,
    neg: &Triple,
    margin: f64,
) -> (f64, Vec<(Slot, Vec<f64>)>) {
    let d = table.d_kg();
    let residual = |t: &Triple| -> Vec<f64> {
        let (h, r, o) = (
            table.entities.row(t.subject.index()),
            table.relations.row(t.predicate.index()),
            table.entities.row(t.object.index()),
        );
        (0..d).map(|k| h[k] + r[k] - o[k]).collect()
    };
    let rp = residual(pos);
    let rn = residual(neg);
    let (dp, dn) = (math::l2_norm(&rp), math::l2_norm(&rn));
    let loss = margin + dp - dn;
    if loss <= 0.0 {
        return (0.0, Vec::new());
    }
    let unit = |v: &[f64], n: f64| -> Vec<f64> {
        if n > 0.0 {
            v.iter().map(|x| x / n).collect()
        } else {
            vec![0.0; v.len()]
        }
    };
    let gp = unit(&rp, dp);
    let gn = unit(&rn, dn);
    let neg_of = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| -x).collect() };
    let grads = vec![
        (Slot::Entity(pos.subject), gp.clone()),
        (Slot::Entity(pos.object), neg_of(&gp)),
        (Slot::Relation(pos.predicate), gp.iter().zip(&gn).map(|(a, b)| a - b).collect()),
        (Slot::Entity(neg.subject), neg_of(&gn)),
        (Slot::Entity(neg.object), gn),
    ];
    (loss, grads)
}

/// Random initialization: uniform in `±6/√d` with unit-norm rows.
pub fn init_table(kg: &KnowledgeGraph, d_kg: usize, rng: &mut crate::Rng) -> KgEmbeddingTable {
    let bound = 6.0 / math::sqrt(d_kg as f64);
    let mut relations = Matrix::uniform(kg.relation_count(), d_kg, bound, rng);
    for i in 0..relations.rows() {
        normalize(relations.row_mut(i));
    }
    let mut entities = Matrix::uniform(kg.entity_count(), d_kg, bound, rng);
    for i in 0..entities.rows() {
        normalize(entities.row_mut(i));
    }
    KgEmbeddingTable { entities, relations }
}

/// Result of [`train_transe`].
#[derive(Debug, Clone)]
pub struct TransETraining {
    pub table: KgEmbeddingTable,
    /// Mean hinge loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Draws a corrupted copy of `t`, replacing head or tail with equal chance.
fn corrupt(t: &Triple, entity_count: usize, rng: &mut crate::Rng) -> Triple {
    let head = rng.gen_bool(0.5);
    let original = if head { t.subject } else { t.object };
    let mut pick = rng.gen_range(0..entity_count as u32);
    if entity_count > 1 {
        while pick == original.0 {
            pick = rng.gen_range(0..entity_count as u32);
        }
    }
    let mut c = *t;
    if head {
        c.subject = EntityId(pick);
    } else {
        c.object = EntityId(pick);
    }
    c
}

/// Plain SGD on the margin ranking loss, one update per (positive, negative) pair.
pub fn train_transe(kg: &KnowledgeGraph, cfg: &TransEConfig) -> Result<TransETraining> {
    cfg.validate()?;
    if kg.triples().is_empty() {
        return Err(Error::EmptyGraph);
    }
    let mut rng = crate::seeded_rng(cfg.seed);
    let mut table = init_table(kg, cfg.d_kg, &mut rng);
    let mut order: Vec<usize> = (0..kg.triples().len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut pairs = 0usize;
        for &i in &order {
            let pos = kg.triples()[i];
            for _ in 0..cfg.negatives_per_positive.max(1) {
                let neg = corrupt(&pos, kg.entity_count(), &mut rng);
                let (loss, grads) = margin_loss_grad(&table, &pos, &neg, cfg.margin);
                total += loss;
                pairs += 1;
                for (slot, g) in grads {
                    let row = match slot {
                        Slot::Entity(e) => table.entities.row_mut(e.index()),
                        Slot::Relation(r) => table.relations.row_mut(r.index()),
                    };
                    for (x, g) in row.iter_mut().zip(&g) {
                        *x -= cfg.learning_rate * g;
                    }
                }
            }
        }
        let mean = total / pairs.max(1) as f64;
        if !mean.is_finite() || !table.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, value: mean });
        }
        table.project_entities();
        epoch_losses.push(mean);
    }
    Ok(TransETraining { table, epoch_losses })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankMode {
    Raw,
    Filter,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkPredictionMetrics {
    pub mean_rank: f64,
    pub mean_reciprocal_rank: f64,
    pub hits_at_1: f64,
    pub hits_at_3: f64,
    pub hits_at_10: f64,
    /// Number of ranked queries (two per test triple).
    pub queries: usize,
}

impl LinkPredictionMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        let n = ranks.len().max(1) as f64;
        let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Self {
            mean_rank: ranks.iter().sum::<usize>() as f64 / n,
            mean_reciprocal_rank: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            hits_at_1: hits(1),
            hits_at_3: hits(3),
            hits_at_10: hits(10),
            queries: ranks.len(),
        }
    }
}

/// 1 + the number of competitors scoring at most as well as the truth
/// (lower scores win; ties count against the truth).
pub fn pessimistic_rank(scores: &[f64], truth: usize, skip: impl Fn(usize) -> bool) -> usize {
    let target = scores[truth];
    1 + scores.iter().enumerate().filter(|&(j, &s)| j != truth && !skip(j) && s <= target).count()
}

/// Head and tail ranks of every graph triple.
pub fn link_prediction_eval(kg: &KnowledgeGraph, table: &KgEmbeddingTable, mode: RankMode) -> Result<LinkPredictionMetrics> {
    link_prediction_eval_on(kg, table, kg.triples(), mode)
}

/// Ranks the tail of each test triple against every entity, and the head
/// symmetrically. Filter mode skips corruptions that are graph triples.
pub fn link_prediction_eval_on(
    kg: &KnowledgeGraph,
    table: &KgEmbeddingTable,
    test: &[Triple],
    mode: RankMode,
) -> Result<LinkPredictionMetrics> {
    table.check_covers(kg)?;
    let n = kg.entity_count();
    let mut ranks = Vec::with_capacity(test.len() * 2);
    let mut scores = vec![0.0; n];
    for t in test {
        let (h, r, o) = (t.subject.index(), t.predicate.index(), t.object.index());
        for (e, s) in scores.iter_mut().enumerate() {
            *s = score_ids(table, h, r, e);
        }
        ranks.push(pessimistic_rank(&scores, o, |e| {
            mode == RankMode::Filter
                && kg.contains(&Triple { subject: t.subject, predicate: t.predicate, object: EntityId(e as u32) })
        }));
        for (e, s) in scores.iter_mut().enumerate() {
            *s = score_ids(table, e, r, o);
        }
        ranks.push(pessimistic_rank(&scores, h, |e| {
            mode == RankMode::Filter
                && kg.contains(&Triple { subject: EntityId(e as u32), predicate: t.predicate, object: t.object })
        }));
    }
    Ok(LinkPredictionMetrics::from_ranks(&ranks))
}

//! LSTM graph walker that scores responses by the likelihood of the
//! annotated path and picks the best candidate.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embed::KgEmbeddingTable;
use crate::generator::Candidate;
use crate::kg::{Action, EntityId, KnowledgeGraph, SubGraph};
use crate::math;
use crate::optim::{clip_global_norm, Adam};
use crate::prompting::{self, DialogueSample, Vocab};
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankerConfig {
    pub d_rr: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    /// Decoupled Adam weight decay.
    pub weight_decay: f64,
    pub seed: u64,
    pub max_hops: usize,
    pub beam_width: usize,
    /// Adds mapped KG vectors to the action embeddings.
    pub use_kg: bool,
}

impl Default for RerankerConfig {
    fn default() -> Self {
        Self {
            d_rr: 64,
            learning_rate: 3e-3,
            epochs: 60,
            batch_size: 8,
            clip_norm: 5.0,
            weight_decay: 0.3,
            seed: 0,
            max_hops: 3,
            beam_width: 32,
            use_kg: true,
        }
    }
}

impl RerankerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_rr == 0 || self.max_hops == 0 || self.beam_width == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("d_rr, max_hops, beam_width and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankerParams {
    pub tok_emb: ParamId,
    pub kg_map: ParamId,
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_lstm: ParamId,
    pub w_bil: ParamId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankerModel {
    pub config: RerankerConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub params: RerankerParams,
    pub d_kg: usize,
}

/// One walker step: candidate actions, their probabilities and the gold index.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub actions: Vec<Action>,
    pub probs: Vec<f64>,
    pub gold: usize,
}

/// A complete walk ending in STOP (the STOP itself is not listed).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPath {
    pub actions: Vec<Action>,
    pub log_prob: f64,
}

/// Outcome of [`select_response`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub scores: Vec<f64>,
}

/// Recurrent state between steps.
#[derive(Debug, Clone, PartialEq)]
struct WalkState {
    h: Matrix,
    c: Matrix,
    input: Matrix,
    current: EntityId,
}

/// Token table over the corpus dialogue text and graph names.
pub fn build_vocab(corpus: &[DialogueSample], kg: &KnowledgeGraph) -> Vocab {
    let mut vocab = Vocab::new();
    for s in corpus {
        vocab.observe(&s.history_text());
        if let Some(r) = s.response() {
            vocab.observe(r);
        }
    }
    for name in kg.entity_names().iter().chain(kg.relation_names()) {
        vocab.observe(name);
    }
    vocab
}

const EMBED_BOUND: f64 = 2.0;

impl RerankerModel {
    /// Fresh weights. The bilinear scorer starts at zero, so every step of an
    /// untrained walker is uniform over its candidates.
    pub fn new(config: RerankerConfig, vocab: Vocab, d_kg: usize) -> Result<Self> {
        config.validate()?;
        if d_kg == 0 {
            return Err(Error::InvalidConfig("d_kg must be positive".into()));
        }
        let d = config.d_rr;
        let mut rng = crate::seeded_rng(config.seed);
        let mut store = ParamStore::new();
        let tok_emb = store.add("rr.tok_emb", Matrix::uniform(vocab.len(), d, EMBED_BOUND, &mut rng));
        let kg_map = store.add("rr.kg_map", Matrix::xavier(d_kg, d, &mut rng));
        let init_w = store.add("rr.init.w", Matrix::xavier(2 * d, d, &mut rng));
        let init_b = store.add("rr.init.b", Matrix::zeros(1, d));
        let w_ih = store.add("rr.lstm.w_ih", Matrix::xavier(2 * d, 4 * d, &mut rng));
        let w_hh = store.add("rr.lstm.w_hh", Matrix::xavier(d, 4 * d, &mut rng));
        let mut bias = Matrix::zeros(1, 4 * d);
        bias.data_mut()[d..2 * d].fill(1.0);
        let b_lstm = store.add("rr.lstm.b", bias);
        let w_bil = store.add("rr.w_bil", Matrix::zeros(d, 2 * d));
        let params = RerankerParams { tok_emb, kg_map, init_w, init_b, w_ih, w_hh, b_lstm, w_bil };
        Ok(Self { config, vocab, store, params, d_kg })
    }

    fn d(&self) -> usize {
        self.config.d_rr
    }

    fn check_table(&self, table: &KgEmbeddingTable) -> Result<()> {
        if table.d_kg() != self.d_kg {
            return Err(Error::DimensionMismatch { expected: self.d_kg, got: table.d_kg() });
        }
        Ok(())
    }

    fn sentence_var<'a>(&'a self, tape: &mut Tape<'a>, text: &str) -> Var {
        let ids: Vec<usize> = prompting::encode(text, &self.vocab).into_iter().map(|i| i as usize).collect();
        if ids.is_empty() {
            return tape.constant(Matrix::zeros(1, self.d()));
        }
        let table = tape.param(&self.store, self.params.tok_emb);
        let rows = tape.gather(table, &ids);
        tape.mean_rows(rows)
    }

    /// Mean of the token embeddings of `text`; zero for empty text.
    pub fn sentence_embed(&self, text: &str) -> Vec<f64> {
        let mut tape = Tape::new();
        let v = self.sentence_var(&mut tape, text);
        tape.value(v).data().to_vec()
    }

    /// `n x 2·d_rr` embeddings of `actions`, taken from `current`.
    fn actions_var<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        actions: &[Action],
        kg: &KnowledgeGraph,
        table: &KgEmbeddingTable,
        names: &mut BTreeMap<(bool, u32), Var>,
    ) -> Result<Var> {
        let d = self.d();
        let n = actions.len();
        let mut ent_sent = Vec::with_capacity(n);
        let mut rel_sent = Vec::with_capacity(n);
        let mut ent_kg = Matrix::zeros(n, self.d_kg);
        let mut rel_kg = Matrix::zeros(n, self.d_kg);
        for (i, a) in actions.iter().enumerate() {
            let ev = match names.get(&(true, a.target.0)) {
                Some(&v) => v,
                None => {
                    let v = self.sentence_var(tape, kg.entity_name(a.target));
                    names.insert((true, a.target.0), v);
                    v
                }
            };
            ent_sent.push(ev);
            ent_kg.row_mut(i).copy_from_slice(table.entity(a.target)?);
            if a.is_stop {
                let z = match names.get(&(false, u32::MAX)) {
                    Some(&v) => v,
                    None => {
                        let v = tape.constant(Matrix::zeros(1, d));
                        names.insert((false, u32::MAX), v);
                        v
                    }
                };
                rel_sent.push(z);
            } else {
                let rv = match names.get(&(false, a.relation.0)) {
                    Some(&v) => v,
                    None => {
                        let v = self.sentence_var(tape, kg.relation_name(a.relation));
                        names.insert((false, a.relation.0), v);
                        v
                    }
                };
                rel_sent.push(rv);
                let sign = if a.inverse { -1.0 } else { 1.0 };
                for (o, x) in rel_kg.row_mut(i).iter_mut().zip(table.relation(a.relation)?) {
                    *o = sign * x;
                }
            }
        }
        let mut ent = tape.concat_rows(&ent_sent);
        let mut rel = tape.concat_rows(&rel_sent);
        if self.config.use_kg {
            let map = tape.param(&self.store, self.params.kg_map);
            let ek = tape.constant(ent_kg);
            let ek = tape.matmul(ek, map);
            ent = tape.add(ent, ek);
            let rk = tape.constant(rel_kg);
            let rk = tape.matmul(rk, map);
            rel = tape.add(rel, rk);
        }
        Ok(tape.concat_cols(&[ent, rel]))
    }

    /// `(e_kg + e_sent) ⊕ (±r_kg + r_sent)`; STOP keeps the current entity
    /// and a zero relation half.
    pub fn action_embed(&self, action: &Action, kg: &KnowledgeGraph, table: &KgEmbeddingTable) -> Result<Vec<f64>> {
        self.check_table(table)?;
        let mut tape = Tape::new();
        let v = self.actions_var(&mut tape, core::slice::from_ref(action), kg, table, &mut BTreeMap::new())?;
        Ok(tape.value(v).data().to_vec())
    }

    fn initial_var<'a>(&'a self, tape: &mut Tape<'a>, history: &str, response: &str) -> (Var, Var) {
        let hs = self.sentence_var(tape, history);
        let rs = self.sentence_var(tape, response);
        let x = tape.concat_cols(&[hs, rs]);
        let w = tape.param(&self.store, self.params.init_w);
        let b = tape.param(&self.store, self.params.init_b);
        let pre = tape.matmul(x, w);
        let pre = tape.add_row(pre, b);
        let h = tape.tanh(pre);
        let c = tape.constant(Matrix::zeros(1, self.d()));
        (h, c)
    }

    /// Walker input before the first step: the head entity half and zeros.
    fn head_input_var<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        head: EntityId,
        kg: &KnowledgeGraph,
        table: &KgEmbeddingTable,
        names: &mut BTreeMap<(bool, u32), Var>,
    ) -> Result<Var> {
        let a = self.actions_var(tape, &[Action::stop(head)], kg, table, names)?;
        let ent = tape.slice_cols(a, 0, self.d());
        let zero = tape.constant(Matrix::zeros(1, self.d()));
        Ok(tape.concat_cols(&[ent, zero]))
    }

    fn lstm_var<'a>(&'a self, tape: &mut Tape<'a>, x: Var, h: Var, c: Var) -> (Var, Var) {
        let d = self.d();
        let w_ih = tape.param(&self.store, self.params.w_ih);
        let w_hh = tape.param(&self.store, self.params.w_hh);
        let b = tape.param(&self.store, self.params.b_lstm);
        let gx = tape.matmul(x, w_ih);
        let gh = tape.matmul(h, w_hh);
        let g = tape.add(gx, gh);
        let g = tape.add_row(g, b);
        let i = tape.slice_cols(g, 0, d);
        let i = tape.sigmoid(i);
        let f = tape.slice_cols(g, d, d);
        let f = tape.sigmoid(f);
        let u = tape.slice_cols(g, 2 * d, d);
        let u = tape.tanh(u);
        let o = tape.slice_cols(g, 3 * d, d);
        let o = tape.sigmoid(o);
        let fc = tape.mul(f, c);
        let iu = tape.mul(i, u);
        let c2 = tape.add(fc, iu);
        let tc = tape.tanh(c2);
        let h2 = tape.mul(o, tc);
        (h2, c2)
    }

    fn logits_var<'a>(&'a self, tape: &mut Tape<'a>, h: Var, actions: Var) -> Var {
        let w = tape.param(&self.store, self.params.w_bil);
        let q = tape.matmul(h, w);
        tape.matmul_t(q, actions)
    }

    /// Gold actions of `path` followed by the terminal STOP.
    fn gold_sequence(path: &SubGraph) -> Vec<Action> {
        let mut gold = path.actions();
        let end = gold.last().map_or(path.start(), |a| a.target);
        gold.push(Action::stop(end));
        gold
    }

    /// Teacher-forced walk; returns the summed negative log-likelihood.
    fn walk_var<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        history: &str,
        response: &str,
        path: &SubGraph,
        kg: &KnowledgeGraph,
        table: &KgEmbeddingTable,
        mut trace: Option<&mut Vec<StepTrace>>,
    ) -> Result<Var> {
        self.check_table(table)?;
        let mut names = BTreeMap::new();
        let (mut h, mut c) = self.initial_var(tape, history, response);
        let mut current = path.start();
        let mut x = self.head_input_var(tape, current, kg, table, &mut names)?;
        let mut total: Option<Var> = None;
        for gold in Self::gold_sequence(path) {
            let cands = kg.outgoing_actions(current)?;
            let idx = cands
                .iter()
                .position(|a| *a == gold)
                .ok_or_else(|| Error::GoldActionMissing(gold.describe(kg)))?;
            let (h2, c2) = self.lstm_var(tape, x, h, c);
            let a = self.actions_var(tape, &cands, kg, table, &mut names)?;
            let logits = self.logits_var(tape, h2, a);
            if let Some(t) = trace.as_deref_mut() {
                let lp = math::log_softmax(tape.value(logits).row(0));
                t.push(StepTrace { actions: cands.clone(), probs: lp.iter().map(|l| math::exp(*l)).collect(), gold: idx });
            }
            let nll = tape.cross_entropy(logits, &[idx]);
            total = Some(match total {
                Some(t) => tape.add(t, nll),
                None => nll,
            });
            x = tape.gather(a, &[idx]);
            h = h2;
            c = c2;
            current = gold.target;
        }
        Ok(total.expect("gold sequence ends with STOP"))
    }

    /// `log p(path + STOP | H, R)` under teacher forcing.
    pub fn path_logprob(
        &self,
        history: &str,
        response: &str,
        path: &SubGraph,
        kg: &KnowledgeGraph,
        table: &KgEmbeddingTable,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let v = self.walk_var(&mut tape, history, response, path, kg, table, None)?;
        Ok(-tape.scalar(v))
    }

    /// Per-step candidate distributions along the gold walk.
    pub fn path_trace(
        &self,
        history: &str,
        response: &str,
        path: &SubGraph,
        kg: &KnowledgeGraph,
        table: &KgEmbeddingTable,
    ) -> Result<Vec<StepTrace>> {
        let mut tape = Tape::new();
        let mut trace = Vec::new();
        self.walk_var(&mut tape, history, response, path, kg, table, Some(&mut trace))?;
        Ok(trace)
    }

    /// Negative log-likelihood and gradients indexed like `self.store`.
    pub fn nll_and_grads(
        &self,
        history: &str,
        response: &str,
        path: &SubGraph,
        kg: &KnowledgeGraph,
        table: &KgEmbeddingTable,
    ) -> Result<(f64, Vec<Matrix>)> {
        let mut grads = self.store.zero_grads();
        let nll = self.accumulate(history, response, path, kg, table, &mut grads)?;
        Ok((nll, grads))
    }

    fn accumulate(
        &self,
        history: &str,
        response: &str,
        path: &SubGraph,
        kg: &KnowledgeGraph,
        table: &KgEmbeddingTable,
        into: &mut [Matrix],
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let v = self.walk_var(&mut tape, history, response, path, kg, table, None)?;
        let g = tape.backward(v);
        tape.accumulate_param_grads(&g, into);
        Ok(tape.scalar(v))
    }

    fn initial_state(
        &self,
        history: &str,
        response: &str,
        head: EntityId,
        kg: &KnowledgeGraph,
        table: &KgEmbeddingTable,
    ) -> Result<WalkState> {
        let mut tape = Tape::new();
        let (h, c) = self.initial_var(&mut tape, history, response);
        let x = self.head_input_var(&mut tape, head, kg, table, &mut BTreeMap::new())?;
        Ok(WalkState { h: tape.value(h).clone(), c: tape.value(c).clone(), input: tape.value(x).clone(), current: head })
    }

    /// One free-running step: candidates, their log-probabilities and the
    /// successor state for each candidate.
    fn expand(&self, state: &WalkState, kg: &KnowledgeGraph, table: &KgEmbeddingTable) -> Result<Vec<(Action, f64, WalkState)>> {
        let mut tape = Tape::new();
        let x = tape.constant(state.input.clone());
        let h = tape.constant(state.h.clone());
        let c = tape.constant(state.c.clone());
        let (h2, c2) = self.lstm_var(&mut tape, x, h, c);
        let cands = kg.outgoing_actions(state.current)?;
        let a = self.actions_var(&mut tape, &cands, kg, table, &mut BTreeMap::new())?;
        let logits = self.logits_var(&mut tape, h2, a);
        let lp = math::log_softmax(tape.value(logits).row(0));
        let (hv, cv, av) = (tape.value(h2), tape.value(c2), tape.value(a));
        Ok(cands
            .into_iter()
            .enumerate()
            .map(|(j, act)| {
                let next = WalkState { h: hv.clone(), c: cv.clone(), input: Matrix::row_vector(av.row(j)), current: act.target };
                (act, lp[j], next)
            })
            .collect())
    }

    /// Beam search over STOP-terminated walks from `head`, best first.
    pub fn rank_paths(
        &self,
        history: &str,
        response: &str,
        head: EntityId,
        kg: &KnowledgeGraph,
        table: &KgEmbeddingTable,
    ) -> Result<Vec<ScoredPath>> {
        self.check_table(table)?;
        let mut live = vec![(Vec::<Action>::new(), 0.0, self.initial_state(history, response, head, kg, table)?)];
        let mut complete = Vec::new();
        for hop in 0..=self.config.max_hops {
            let mut next = Vec::new();
            for (actions, lp, state) in &live {
                for (act, l, succ) in self.expand(state, kg, table)? {
                    if act.is_stop {
                        complete.push(ScoredPath { actions: actions.clone(), log_prob: lp + l });
                    } else if hop < self.config.max_hops {
                        let mut a = actions.clone();
                        a.push(act);
                        next.push((a, lp + l, succ));
                    }
                }
            }
            next.sort_by(|a, b| crate::generator::rank_order(a.1, &a.0, b.1, &b.0));
            next.truncate(self.config.beam_width);
            live = next;
            if live.is_empty() {
                break;
            }
        }
        complete.sort_by(|a, b| crate::generator::rank_order(a.log_prob, &a.actions, b.log_prob, &b.actions));
        Ok(complete)
    }
}

/// Index of the candidate under which the walker gives `path` the highest
/// probability; the earliest candidate wins ties.
pub fn select_response(
    model: &RerankerModel,
    history: &str,
    path: &SubGraph,
    candidates: &[Candidate],
    kg: &KnowledgeGraph,
    table: &KgEmbeddingTable,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::InvalidSample("no candidates to select from".into()));
    }
    let scores = candidates
        .iter()
        .map(|c| model.path_logprob(history, &c.text, path, kg, table))
        .collect::<Result<Vec<_>>>()?;
    Ok(Selection { index: argmax_first(&scores), scores })
}

/// First index of the maximum.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Result of [`train_reranker`].
#[derive(Debug, Clone)]
pub struct RerankerTraining {
    pub model: RerankerModel,
    /// Mean per-sample path NLL for each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Maximizes the gold path likelihood with the gold response as `R`.
pub fn train_reranker(
    corpus: &[DialogueSample],
    kg: &KnowledgeGraph,
    table: &KgEmbeddingTable,
    cfg: &RerankerConfig,
) -> Result<RerankerTraining> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut model = RerankerModel::new(cfg.clone(), build_vocab(corpus, kg), table.d_kg())?;
    let items: Vec<(alloc::string::String, &str, &SubGraph)> = corpus
        .iter()
        .map(|s| {
            let r = s.response().ok_or_else(|| Error::InvalidSample("training sample without a response".into()))?;
            Ok((s.history_text(), r, s.sub_graph()))
        })
        .collect::<Result<_>>()?;
    let mut rng = crate::seeded_rng(cfg.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut adam = Adam::new(&model.store, cfg.learning_rate);
    adam.weight_decay = cfg.weight_decay;
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.store.zero_grads();
            for &i in batch {
                let (h, r, p) = &items[i];
                total += model.accumulate(h, r, p, kg, table, &mut grads)?;
            }
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.scale_assign(inv));
            if cfg.clip_norm > 0.0 {
                clip_global_norm(&mut grads, cfg.clip_norm);
            }
            adam.step(&mut model.store, &grads);
        }
        let mean = total / items.len() as f64;
        if !mean.is_finite() || !model.store.all_finite() {
            return Err(Error::NonFiniteLoss { epoch, value: mean });
        }
        log::debug!("reranker epoch {epoch}: nll {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(RerankerTraining { model, epoch_losses })
}

/// Fraction of samples whose gold walk is among the `k` best complete walks
/// found by beam search, conditioned on the gold response.
pub fn path_beam_hits_at_k(
    model: &RerankerModel,
    corpus: &[DialogueSample],
    kg: &KnowledgeGraph,
    table: &KgEmbeddingTable,
    k: usize,
) -> Result<f64> {
    if k == 0 || model.config.beam_width < k {
        return Err(Error::InvalidConfig(format!("need 1 <= k <= beam_width, got k = {k}")));
    }
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut hits = 0usize;
    for s in corpus {
        let gold = s.sub_graph().actions();
        let ranked = model.rank_paths(&s.history_text(), s.response().unwrap_or(""), s.sub_graph().start(), kg, table)?;
        if ranked.iter().take(k).any(|p| p.actions == gold) {
            hits += 1;
        }
    }
    Ok(hits as f64 / corpus.len() as f64)
}

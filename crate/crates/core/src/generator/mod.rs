//! Knowledge-grounded encoder-decoder and beam generation.

mod beam;
pub mod network;

pub use beam::{beam_search, rank_order, BeamConfig, Hypothesis, StepScorer};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embed::KgEmbeddingTable;
use crate::grounding::{self, GroundingParams};
use crate::kg::{KnowledgeGraph, SubGraph};
use crate::linking::AliasLexicon;
use crate::math;
use crate::optim::{clip_global_norm, Adam};
use crate::prompting::{self, DialogueSample, TokenSequence, Vocab, BOS, EOS};
use crate::tape::{ParamStore, Tape, Var};
use crate::tensor::Matrix;
use crate::{Error, Result};
use network::{Network, NetworkShape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Maximum generated tokens, `<eos>` included.
    pub max_len: usize,
    /// Encoder inputs are cut to this many tokens.
    pub max_src_len: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub beams: usize,
    pub candidates: usize,
    /// Adds local and global grounding to the encoder input.
    pub grounding: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 2,
            ffn_dim: 128,
            max_len: 32,
            max_src_len: 192,
            learning_rate: 3e-4,
            epochs: 30,
            batch_size: 4,
            clip_norm: 1.0,
            seed: 0,
            beams: 4,
            candidates: 4,
            grounding: true,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be a positive multiple of heads");
        }
        if self.layers == 0 || self.ffn_dim == 0 {
            return bad("layers and ffn_dim must be positive");
        }
        if self.max_len == 0 || self.max_src_len == 0 {
            return bad("max_len and max_src_len must be positive");
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return bad("learning_rate and batch_size must be positive");
        }
        self.beam_config().validate()
    }

    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig { beam_width: self.beams, candidates: self.candidates, max_len: self.max_len }
    }
}

/// A generated response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<u32>,
    pub text: String,
    pub log_prob: f64,
    /// Hit `max_len` without emitting `<eos>`.
    pub forced: bool,
}

/// Model inputs and teacher-forcing targets for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub input: TokenSequence,
    pub sub_graph: SubGraph,
    /// `<bos>` followed by the response tokens.
    pub decoder_input: Vec<u32>,
    /// The response tokens followed by `<eos>`.
    pub target: Vec<u32>,
}

/// Token table covering every corpus input, response and graph name.
pub fn build_vocab(corpus: &[DialogueSample], kg: &KnowledgeGraph) -> Vocab {
    let mut vocab = Vocab::new();
    for s in corpus {
        vocab.observe(&s.serialize(kg));
        if let Some(r) = s.response() {
            vocab.observe(r);
        }
    }
    for name in kg.entity_names().iter().chain(kg.relation_names()) {
        vocab.observe(name);
    }
    vocab
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub network: Network,
    pub grounding: GroundingParams,
}

impl GeneratorModel {
    /// Fresh parameters drawn from `config.seed`. Grounding parameters are
    /// always allocated so grounded and vanilla models share an initialization.
    pub fn new(config: GeneratorConfig, vocab: Vocab, d_kg: usize) -> Result<Self> {
        config.validate()?;
        if d_kg == 0 {
            return Err(Error::InvalidConfig("d_kg must be positive".into()));
        }
        let mut rng = crate::seeded_rng(config.seed);
        let mut store = ParamStore::new();
        let shape = NetworkShape {
            vocab_size: vocab.len(),
            d_model: config.d_model,
            heads: config.heads,
            layers: config.layers,
            ffn_dim: config.ffn_dim,
            max_src_len: config.max_src_len,
            max_tgt_len: config.max_len,
        };
        let network = Network::init(&mut store, shape, &mut rng);
        let grounding = GroundingParams::init(&mut store, d_kg, config.d_model, &mut rng);
        Ok(Self { config, vocab, store, network, grounding })
    }

    pub fn d_kg(&self) -> usize {
        self.grounding.d_kg
    }

    /// Tokenized, linked input plus (when a response is present) decoder targets.
    pub fn encode_sample(&self, sample: &DialogueSample, kg: &KnowledgeGraph, lexicon: &AliasLexicon) -> EncodedSample {
        let mut input = prompting::prepare_input(sample, kg, lexicon, &self.vocab);
        let cut = self.config.max_src_len;
        input.tokens.truncate(cut);
        input.surface.truncate(cut);
        input.link.truncate(cut);
        let mut response = sample.response().map(|r| prompting::encode(r, &self.vocab)).unwrap_or_default();
        response.truncate(self.config.max_len - 1);
        let mut decoder_input = Vec::with_capacity(response.len() + 1);
        decoder_input.push(BOS);
        decoder_input.extend(&response);
        let mut target = response;
        target.push(EOS);
        EncodedSample { input, sub_graph: sample.sub_graph().clone(), decoder_input, target }
    }

    fn encoder_input<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        input: &TokenSequence,
        sub_graph: &SubGraph,
        table: &KgEmbeddingTable,
    ) -> Result<Var> {
        if input.is_empty() {
            return Err(Error::InvalidSample("empty encoder input".into()));
        }
        if table.d_kg() != self.d_kg() {
            return Err(Error::DimensionMismatch { expected: self.d_kg(), got: table.d_kg() });
        }
        let w = self.network.embed(tape, &self.store, &input.tokens);
        if !self.config.grounding {
            return Ok(w);
        }
        let rows = grounding::token_kg_rows(input, table)?;
        let rows = tape.constant(rows);
        let local = grounding::local_grounding_var(tape, &self.store, &self.grounding, rows);
        let bank = grounding::memory_bank_var(tape, &self.store, &self.grounding, sub_graph, table)?;
        let global = grounding::global_grounding_var(tape, w, bank, &grounding::linked_mask(input));
        Ok(grounding::fuse_var(tape, w, local, global))
    }

    /// Loss variable: mean token cross-entropy of the gold response.
    fn loss_var<'a>(&'a self, tape: &mut Tape<'a>, sample: &EncodedSample, table: &KgEmbeddingTable) -> Result<Var> {
        let x = self.encoder_input(tape, &sample.input, &sample.sub_graph, table)?;
        let memory = self.network.encode(tape, &self.store, x);
        let logits = self.network.decode(tape, &self.store, memory, &sample.decoder_input);
        let targets: Vec<usize> = sample.target.iter().map(|&t| t as usize).collect();
        let nll = tape.cross_entropy(logits, &targets);
        Ok(tape.scale(nll, 1.0 / targets.len() as f64))
    }

    pub fn loss(&self, sample: &EncodedSample, table: &KgEmbeddingTable) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.loss_var(&mut tape, sample, table)?;
        Ok(tape.scalar(l))
    }

    /// Loss and per-parameter gradients, indexed like `self.store`.
    pub fn loss_and_grads(&self, sample: &EncodedSample, table: &KgEmbeddingTable) -> Result<(f64, Vec<Matrix>)> {
        let mut grads = self.store.zero_grads();
        let loss = self.accumulate(sample, table, &mut grads)?;
        Ok((loss, grads))
    }

    fn accumulate(&self, sample: &EncodedSample, table: &KgEmbeddingTable, into: &mut [Matrix]) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.loss_var(&mut tape, sample, table)?;
        let g = tape.backward(l);
        tape.accumulate_param_grads(&g, into);
        Ok(tape.scalar(l))
    }

    /// Encoder output for one input.
    pub fn encode(&self, input: &TokenSequence, sub_graph: &SubGraph, table: &KgEmbeddingTable) -> Result<Matrix> {
        let mut tape = Tape::new();
        let x = self.encoder_input(&mut tape, input, sub_graph, table)?;
        let m = self.network.encode(&mut tape, &self.store, x);
        Ok(tape.value(m).clone())
    }

    /// Next-token log-probabilities after `<bos>` and `prefix`.
    pub fn next_log_probs(&self, memory: &Matrix, prefix: &[u32]) -> Result<Vec<f64>> {
        if prefix.len() + 1 > self.config.max_len {
            return Err(Error::InvalidConfig(format!("prefix longer than max_len {}", self.config.max_len)));
        }
        let mut tape = Tape::new();
        let mem = tape.constant(memory.clone());
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(BOS);
        ids.extend_from_slice(prefix);
        let logits = self.network.decode(&mut tape, &self.store, mem, &ids);
        let v = tape.value(logits);
        Ok(math::log_softmax(v.row(v.rows() - 1)))
    }

    /// Beam search with the configured `B` and `N`.
    pub fn generate(
        &self,
        sample: &DialogueSample,
        kg: &KnowledgeGraph,
        lexicon: &AliasLexicon,
        table: &KgEmbeddingTable,
    ) -> Result<Vec<Candidate>> {
        self.beam_generate(sample, kg, lexicon, table, self.config.candidates, self.config.beams)
    }

    pub fn beam_generate(
        &self,
        sample: &DialogueSample,
        kg: &KnowledgeGraph,
        lexicon: &AliasLexicon,
        table: &KgEmbeddingTable,
        candidates: usize,
        beams: usize,
    ) -> Result<Vec<Candidate>> {
        let enc = self.encode_sample(sample, kg, lexicon);
        let memory = self.encode(&enc.input, &enc.sub_graph, table)?;
        let scorer = ModelScorer { model: self, memory };
        let cfg = BeamConfig { beam_width: beams, candidates, max_len: self.config.max_len };
        let hyps = beam_search(&scorer, &cfg)?;
        Ok(hyps
            .into_iter()
            .map(|h| {
                let body: &[u32] = if h.forced { &h.tokens } else { &h.tokens[..h.tokens.len() - 1] };
                Candidate { text: prompting::join_tokens(body, &self.vocab), tokens: h.tokens, log_prob: h.log_prob, forced: h.forced }
            })
            .collect())
    }
}

/// Decoder distribution for a fixed encoder output.
pub struct ModelScorer<'a> {
    pub model: &'a GeneratorModel,
    pub memory: Matrix,
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.vocab.len()
    }

    fn eos(&self) -> u32 {
        EOS
    }

    fn next_log_probs(&self, prefix: &[u32]) -> Result<Vec<f64>> {
        self.model.next_log_probs(&self.memory, prefix)
    }
}

/// Result of [`train_generator`].
#[derive(Debug, Clone)]
pub struct GeneratorTraining {
    pub model: GeneratorModel,
    /// Mean per-sample token cross-entropy for each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Teacher-forced Adam training over `corpus`, vocabulary built from it.
pub fn train_generator(
    corpus: &[DialogueSample],
    kg: &KnowledgeGraph,
    lexicon: &AliasLexicon,
    table: &KgEmbeddingTable,
    cfg: &GeneratorConfig,
) -> Result<GeneratorTraining> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab = build_vocab(corpus, kg);
    let model = GeneratorModel::new(cfg.clone(), vocab, table.d_kg())?;
    train_model(model, corpus, kg, lexicon, table)
}

/// Continues training an existing model for `model.config.epochs` epochs.
pub fn train_model(
    mut model: GeneratorModel,
    corpus: &[DialogueSample],
    kg: &KnowledgeGraph,
    lexicon: &AliasLexicon,
    table: &KgEmbeddingTable,
) -> Result<GeneratorTraining> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let cfg = model.config.clone();
    let mut encoded = Vec::with_capacity(corpus.len());
    for s in corpus {
        if s.response().is_none() {
            return Err(Error::InvalidSample("training sample without a response".into()));
        }
        encoded.push(model.encode_sample(s, kg, lexicon));
    }
    let mut rng = crate::seeded_rng(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = Adam::new(&model.store, cfg.learning_rate);
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.store.zero_grads();
            for &i in batch {
                total += model.accumulate(&encoded[i], table, &mut grads)?;
            }
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.scale_assign(inv));
            if cfg.clip_norm > 0.0 {
                clip_global_norm(&mut grads, cfg.clip_norm);
            }
            adam.step(&mut model.store, &grads);
        }
        let mean = total / encoded.len() as f64;
        if !mean.is_finite() || !model.store.all_finite() {
            return Err(Error::NonFiniteLoss { epoch, value: mean });
        }
        log::debug!("generator epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok(GeneratorTraining { model, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompting::{Speaker, Utterance};
    use alloc::vec;
    use rand::Rng as _;

    fn toy() -> (KnowledgeGraph, Vec<DialogueSample>, AliasLexicon, KgEmbeddingTable) {
        let kg = KnowledgeGraph::from_records([
            ("Alien", "directed_by", "Ridley Scott"),
            ("Heat", "directed_by", "Michael Mann"),
        ])
        .unwrap();
        let lex = AliasLexicon::build(&kg).unwrap();
        let samples = kg
            .triples()
            .iter()
            .map(|t| {
                let n = kg.named(t);
                let sub = kg.validate_path(&[*t]).unwrap();
                let hist = vec![Utterance::new(Speaker::User, format!("Who made {}?", n.subject))];
                DialogueSample::new(hist, Some(format!("{} directed {}.", n.object, n.subject)), sub).unwrap()
            })
            .collect();
        let mut rng = crate::seeded_rng(3);
        let table = crate::embed::init_table(&kg, 4, &mut rng);
        (kg, samples, lex, table)
    }

    fn small_config() -> GeneratorConfig {
        GeneratorConfig { d_model: 8, layers: 1, heads: 2, ffn_dim: 16, max_len: 12, ..GeneratorConfig::default() }
    }

    #[test]
    fn config_validation() {
        assert!(GeneratorConfig { heads: 3, ..GeneratorConfig::default() }.validate().is_err());
        assert!(GeneratorConfig { beams: 2, candidates: 3, ..GeneratorConfig::default() }.validate().is_err());
        assert!(GeneratorConfig::default().validate().is_ok());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (kg, samples, lex, table) = toy();
        let vocab = build_vocab(&samples, &kg);
        let mut model = GeneratorModel::new(small_config(), vocab, table.d_kg()).unwrap();
        let enc = model.encode_sample(&samples[0], &kg, &lex);
        assert!(enc.input.link.iter().any(Option::is_some));
        let (_, grads) = model.loss_and_grads(&enc, &table).unwrap();
        let mut rng = crate::seeded_rng(11);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for id in model.store.ids().collect::<Vec<_>>() {
            let n = model.store.get(id).data().len();
            for _ in 0..4 {
                let k = rng.gen_range(0..n);
                let orig = model.store.get(id).data()[k];
                model.store.get_mut(id).data_mut()[k] = orig + h;
                let up = model.loss(&enc, &table).unwrap();
                model.store.get_mut(id).data_mut()[k] = orig - h;
                let down = model.loss(&enc, &table).unwrap();
                model.store.get_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads[id.0].data()[k];
                let scale = analytic.abs().max(numeric.abs());
                if scale > 1e-7 {
                    worst = worst.max((analytic - numeric).abs() / scale);
                }
            }
        }
        assert!(worst < 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn step_distributions_sum_to_one() {
        let (kg, samples, lex, table) = toy();
        let model = GeneratorModel::new(small_config(), build_vocab(&samples, &kg), 4).unwrap();
        let enc = model.encode_sample(&samples[1], &kg, &lex);
        let mem = model.encode(&enc.input, &enc.sub_graph, &table).unwrap();
        for prefix in [&[][..], &[9, 10][..]] {
            let lp = model.next_log_probs(&mem, prefix).unwrap();
            let total: f64 = lp.iter().map(|l| math::exp(*l)).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_epochs_is_initialization_and_seed_is_deterministic() {
        let (kg, samples, lex, table) = toy();
        let cfg = GeneratorConfig { epochs: 0, ..small_config() };
        let t = train_generator(&samples, &kg, &lex, &table, &cfg).unwrap();
        let fresh = GeneratorModel::new(cfg.clone(), build_vocab(&samples, &kg), 4).unwrap();
        assert_eq!(t.model, fresh);
        let cfg = GeneratorConfig { epochs: 2, ..small_config() };
        let a = train_generator(&samples, &kg, &lex, &table, &cfg).unwrap();
        let b = train_generator(&samples, &kg, &lex, &table, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert_ne!(a.model, fresh);
    }

    #[test]
    fn zeroed_grounding_matches_vanilla() {
        let (kg, samples, lex, table) = toy();
        let grounded = GeneratorConfig { epochs: 3, ..small_config() };
        let vanilla = GeneratorConfig { grounding: false, ..grounded.clone() };
        let zero = table.zeroed();
        let a = train_generator(&samples, &kg, &lex, &zero, &grounded).unwrap();
        let b = train_generator(&samples, &kg, &lex, &zero, &vanilla).unwrap();
        assert_eq!(a.epoch_losses, b.epoch_losses);
        let ca = a.model.generate(&samples[0], &kg, &lex, &zero).unwrap();
        let cb = b.model.generate(&samples[0], &kg, &lex, &zero).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn candidates_sorted_and_bounded() {
        let (kg, samples, lex, table) = toy();
        let model = GeneratorModel::new(small_config(), build_vocab(&samples, &kg), 4).unwrap();
        let c = model.generate(&samples[0], &kg, &lex, &table).unwrap();
        assert!(!c.is_empty() && c.len() <= 4);
        for w in c.windows(2) {
            assert!(w[0].log_prob >= w[1].log_prob);
        }
        for x in &c {
            assert!(x.log_prob <= 0.0 && !x.tokens.is_empty());
            assert!(x.tokens.len() <= model.config.max_len);
        }
    }

    #[test]
    fn rejects_empty_corpus_and_wrong_table_width() {
        let (kg, samples, lex, table) = toy();
        assert!(matches!(train_generator(&[], &kg, &lex, &table, &small_config()), Err(Error::EmptyCorpus)));
        let model = GeneratorModel::new(small_config(), build_vocab(&samples, &kg), 5).unwrap();
        let enc = model.encode_sample(&samples[0], &kg, &lex);
        assert!(matches!(model.loss(&enc, &table), Err(Error::DimensionMismatch { .. })));
    }
}

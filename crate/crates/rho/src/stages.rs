//! Pipeline stages. Each reads its inputs from disk and writes its outputs,
//! so running them one by one gives the same artifacts as [`run_pipeline`].

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rho_core::embed::{self, KgEmbeddingTable, LinkPredictionMetrics, RankMode};
use rho_core::generator::{self, Candidate, GeneratorModel};
use rho_core::kg::KnowledgeGraph;
use rho_core::linking::AliasLexicon;
use rho_core::metrics;
use rho_core::prompting::DialogueSample;
use rho_core::reranker::{self, RerankerModel};
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, Stage};
use crate::formats;
use crate::synth;

pub const GENERATOR_KIND: &str = "generator";
pub const RERANKER_KIND: &str = "reranker";

/// Artifact locations for one run.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
}

impl Workspace {
    pub fn new(cfg: &PipelineConfig, out: &Path) -> Self {
        Self { cfg: cfg.resolved(), out: out.to_path_buf() }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn kg_path(&self) -> PathBuf {
        self.cfg.paths.kg.clone().unwrap_or_else(|| self.file("kg.tsv"))
    }
    pub fn train_path(&self) -> PathBuf {
        self.cfg.paths.train.clone().unwrap_or_else(|| self.file("train.jsonl"))
    }
    pub fn valid_path(&self) -> PathBuf {
        self.cfg.paths.valid.clone().unwrap_or_else(|| self.file("valid.jsonl"))
    }
    pub fn test_path(&self) -> PathBuf {
        self.cfg.paths.test.clone().unwrap_or_else(|| self.file("test.jsonl"))
    }
    pub fn table_path(&self) -> PathBuf {
        self.file("kg_embeddings.tsv")
    }
    pub fn generator_path(&self) -> PathBuf {
        self.file("generator.json")
    }
    pub fn reranker_path(&self) -> PathBuf {
        self.file("reranker.json")
    }
    pub fn candidates_path(&self) -> PathBuf {
        self.file("candidates.jsonl")
    }
    pub fn reranked_path(&self) -> PathBuf {
        self.file("reranked.jsonl")
    }
    pub fn report_path(&self) -> PathBuf {
        self.file("report.json")
    }
    pub fn samples_path(&self) -> PathBuf {
        self.file("samples.jsonl")
    }
    pub fn kg_eval_path(&self) -> PathBuf {
        self.file("kg_eval.json")
    }

    pub fn kg(&self) -> Result<KnowledgeGraph> {
        formats::read_kg(&self.kg_path())
    }

    pub fn lexicon(&self, kg: &KnowledgeGraph) -> Result<AliasLexicon> {
        formats::load_lexicon(kg, self.cfg.paths.aliases.as_deref())
    }

    pub fn table(&self, kg: &KnowledgeGraph) -> Result<KgEmbeddingTable> {
        formats::read_table(&self.table_path(), kg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epoch_losses: Vec<f64>,
}

pub fn run_synth(ws: &Workspace) -> Result<()> {
    let data = synth::synth(&ws.cfg.synth, ws.cfg.stage_seed(Stage::Synth))?;
    formats::write_kg(&ws.kg_path(), &data.kg)?;
    formats::write_records(&ws.train_path(), &data.train)?;
    formats::write_records(&ws.valid_path(), &data.valid)?;
    formats::write_records(&ws.test_path(), &data.test)?;
    log::info!(
        "synth: {} entities, {} triples, {}/{}/{} samples",
        data.kg.entity_count(),
        data.kg.triples().len(),
        data.train.len(),
        data.valid.len(),
        data.test.len()
    );
    Ok(())
}

pub fn run_train_kg(ws: &Workspace) -> Result<()> {
    let kg = ws.kg()?;
    let t = embed::train_transe(&kg, &ws.cfg.transe)?;
    formats::write_table(&ws.table_path(), &kg, &t.table)?;
    formats::write_json(&ws.file("transe_log.json"), &TrainingLog { epoch_losses: t.epoch_losses })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KgEvalReport {
    pub raw: LinkPredictionMetrics,
    pub filter: LinkPredictionMetrics,
}

pub fn run_eval_kg(ws: &Workspace) -> Result<KgEvalReport> {
    let kg = ws.kg()?;
    let table = ws.table(&kg)?;
    let report = KgEvalReport {
        raw: embed::link_prediction_eval(&kg, &table, RankMode::Raw)?,
        filter: embed::link_prediction_eval(&kg, &table, RankMode::Filter)?,
    };
    formats::write_json(&ws.kg_eval_path(), &report)?;
    Ok(report)
}

pub fn run_train_gen(ws: &Workspace) -> Result<()> {
    let kg = ws.kg()?;
    let lex = ws.lexicon(&kg)?;
    let table = ws.table(&kg)?;
    let train = formats::read_corpus(&ws.train_path(), &kg)?;
    let t = generator::train_generator(&train, &kg, &lex, &table, &ws.cfg.generator)?;
    formats::save_model(&ws.generator_path(), GENERATOR_KIND, &t.model)?;
    formats::write_json(&ws.file("generator_log.json"), &TrainingLog { epoch_losses: t.epoch_losses })?;
    Ok(())
}

pub fn run_train_rr(ws: &Workspace) -> Result<()> {
    let kg = ws.kg()?;
    let table = ws.table(&kg)?;
    let train = formats::read_corpus(&ws.train_path(), &kg)?;
    let t = reranker::train_reranker(&train, &kg, &table, &ws.cfg.reranker)?;
    formats::save_model(&ws.reranker_path(), RERANKER_KIND, &t.model)?;
    formats::write_json(&ws.file("reranker_log.json"), &TrainingLog { epoch_losses: t.epoch_losses })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub index: usize,
    pub candidates: Vec<Candidate>,
}

pub fn run_generate(ws: &Workspace) -> Result<()> {
    let kg = ws.kg()?;
    let lex = ws.lexicon(&kg)?;
    let table = ws.table(&kg)?;
    let model: GeneratorModel = formats::load_model(&ws.generator_path(), GENERATOR_KIND)?;
    let test = formats::read_corpus(&ws.test_path(), &kg)?;
    let rows = test
        .iter()
        .enumerate()
        .map(|(index, s)| {
            let candidates = model.generate(s, &kg, &lex, &table).with_context(|| format!("sample {index}"))?;
            Ok(CandidateRow { index, candidates })
        })
        .collect::<Result<Vec<_>>>()?;
    formats::write_jsonl(&ws.candidates_path(), &rows)
}

/// One line of the re-ranking report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankRow {
    pub index: usize,
    pub candidates: Vec<String>,
    pub generator_log_probs: Vec<f64>,
    pub path_log_probs: Vec<f64>,
    pub selected: usize,
}

pub fn rerank_sample(
    model: &RerankerModel,
    sample: &DialogueSample,
    candidates: &[Candidate],
    kg: &KnowledgeGraph,
    table: &KgEmbeddingTable,
) -> Result<reranker::Selection> {
    Ok(reranker::select_response(model, &sample.history_text(), sample.sub_graph(), candidates, kg, table)?)
}

pub fn run_rerank(ws: &Workspace) -> Result<()> {
    let kg = ws.kg()?;
    let table = ws.table(&kg)?;
    let model: RerankerModel = formats::load_model(&ws.reranker_path(), RERANKER_KIND)?;
    let test = formats::read_corpus(&ws.test_path(), &kg)?;
    let cands: Vec<CandidateRow> = formats::read_jsonl(&ws.candidates_path())?;
    if cands.len() != test.len() {
        bail!("{} candidate rows for {} test samples", cands.len(), test.len());
    }
    let rows = cands
        .iter()
        .zip(&test)
        .map(|(row, sample)| {
            let (scores, selected) = if ws.cfg.evaluation.rerank {
                let sel = rerank_sample(&model, sample, &row.candidates, &kg, &table)?;
                (sel.scores, sel.index)
            } else {
                (vec![], 0)
            };
            Ok(RerankRow {
                index: row.index,
                candidates: row.candidates.iter().map(|c| c.text.clone()).collect(),
                generator_log_probs: row.candidates.iter().map(|c| c.log_prob).collect(),
                path_log_probs: scores,
                selected,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    formats::write_jsonl(&ws.reranked_path(), &rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu4: f64,
    pub rouge_l_mean: f64,
    pub entity_precision: f64,
    pub entity_recall: f64,
    pub entity_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeDelta {
    pub bleu4: Option<f64>,
    pub rouge_l_mean: Option<f64>,
    pub entity_precision: Option<f64>,
    pub entity_recall: Option<f64>,
    pub entity_f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub bleu4: f64,
    pub rouge_l_mean: f64,
    pub entity_precision: f64,
    pub entity_recall: f64,
    pub entity_f1: f64,
    pub sample_count: usize,
    pub without_reranking: Scores,
    pub relative_delta: RelativeDelta,
    pub path_hits_at_k: f64,
    pub path_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDetail {
    pub index: usize,
    pub reference: String,
    pub response: String,
    pub top_beam: String,
    pub entity_precision: f64,
    pub entity_recall: f64,
    pub entity_f1: f64,
    pub rouge_l: f64,
}

/// BLEU, mean ROUGE-L and macro-averaged entity coverage.
pub fn score(samples: &[DialogueSample], responses: &[String], lexicon: &AliasLexicon) -> Result<(Scores, Vec<metrics::CoverageReport>)> {
    let refs: Vec<&str> = samples.iter().map(|s| s.response().unwrap_or("")).collect();
    let hyps: Vec<&str> = responses.iter().map(String::as_str).collect();
    let bleu4 = metrics::bleu4(&refs, &hyps)?;
    let n = samples.len() as f64;
    let rouge_l_mean = refs.iter().zip(&hyps).map(|(r, h)| metrics::rouge_l(r, h)).sum::<f64>() / n;
    let cov: Vec<_> = samples.iter().zip(&hyps).map(|(s, h)| metrics::entity_coverage(h, s, lexicon)).collect();
    let mean = |f: fn(&metrics::CoverageReport) -> f64| cov.iter().map(f).sum::<f64>() / n;
    let scores = Scores {
        bleu4,
        rouge_l_mean,
        entity_precision: mean(|c| c.precision),
        entity_recall: mean(|c| c.recall),
        entity_f1: mean(|c| c.f1),
    };
    Ok((scores, cov))
}

fn relative(full: f64, base: f64) -> Option<f64> {
    if base == 0.0 {
        None
    } else {
        Some((full - base) / base)
    }
}

pub fn run_evaluate(ws: &Workspace) -> Result<EvaluationReport> {
    let kg = ws.kg()?;
    let lex = ws.lexicon(&kg)?;
    let table = ws.table(&kg)?;
    let test = formats::read_corpus(&ws.test_path(), &kg)?;
    if test.is_empty() {
        bail!(rho_core::Error::EmptyCorpus);
    }
    let rows: Vec<RerankRow> = formats::read_jsonl(&ws.reranked_path())?;
    if rows.len() != test.len() {
        bail!("{} reranked rows for {} test samples", rows.len(), test.len());
    }
    let pick = |r: &RerankRow, i: usize| r.candidates.get(i).cloned().unwrap_or_default();
    let selected: Vec<String> = rows.iter().map(|r| pick(r, r.selected)).collect();
    let top: Vec<String> = rows.iter().map(|r| pick(r, 0)).collect();
    let (full, cov) = score(&test, &selected, &lex)?;
    let (base, _) = score(&test, &top, &lex)?;
    let rr: RerankerModel = formats::load_model(&ws.reranker_path(), RERANKER_KIND)?;
    let k = ws.cfg.evaluation.path_hits_k;
    let path_hits_at_k = reranker::path_beam_hits_at_k(&rr, &test, &kg, &table, k)?;
    let report = EvaluationReport {
        bleu4: full.bleu4,
        rouge_l_mean: full.rouge_l_mean,
        entity_precision: full.entity_precision,
        entity_recall: full.entity_recall,
        entity_f1: full.entity_f1,
        sample_count: test.len(),
        without_reranking: base,
        relative_delta: RelativeDelta {
            bleu4: relative(full.bleu4, base.bleu4),
            rouge_l_mean: relative(full.rouge_l_mean, base.rouge_l_mean),
            entity_precision: relative(full.entity_precision, base.entity_precision),
            entity_recall: relative(full.entity_recall, base.entity_recall),
            entity_f1: relative(full.entity_f1, base.entity_f1),
        },
        path_hits_at_k,
        path_k: k,
    };
    let details: Vec<SampleDetail> = test
        .iter()
        .enumerate()
        .map(|(i, s)| SampleDetail {
            index: i,
            reference: s.response().unwrap_or("").to_string(),
            response: selected[i].clone(),
            top_beam: top[i].clone(),
            entity_precision: cov[i].precision,
            entity_recall: cov[i].recall,
            entity_f1: cov[i].f1,
            rouge_l: metrics::rouge_l(s.response().unwrap_or(""), &selected[i]),
        })
        .collect();
    formats::write_json(&ws.report_path(), &report)?;
    formats::write_jsonl(&ws.samples_path(), &details)?;
    Ok(report)
}

/// Human-readable before/after comparison.
pub fn comparison_table(r: &EvaluationReport) -> String {
    let pct = |d: Option<f64>| d.map_or_else(|| "n/a".to_string(), |v| format!("{:+.2}%", 100.0 * v));
    let rows = [
        ("BLEU-4", r.without_reranking.bleu4, r.bleu4, r.relative_delta.bleu4),
        ("ROUGE-L", r.without_reranking.rouge_l_mean, r.rouge_l_mean, r.relative_delta.rouge_l_mean),
        ("Entity P", r.without_reranking.entity_precision, r.entity_precision, r.relative_delta.entity_precision),
        ("Entity R", r.without_reranking.entity_recall, r.entity_recall, r.relative_delta.entity_recall),
        ("Entity F1", r.without_reranking.entity_f1, r.entity_f1, r.relative_delta.entity_f1),
    ];
    let mut out = format!("{:<10} {:>10} {:>10} {:>9}\n", "metric", "w/o RR", "full", "delta");
    for (name, b, f, d) in rows {
        out.push_str(&format!("{name:<10} {:>10.4} {:>10.4} {:>9}\n", b, f, pct(d)));
    }
    out.push_str(&format!("path Hits@{}: {:.4} over {} samples\n", r.path_k, r.path_hits_at_k, r.sample_count));
    out
}

/// Synthesizes data unless a graph path is configured, then runs every stage.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<EvaluationReport> {
    let ws = Workspace::new(cfg, out);
    if ws.cfg.paths.kg.is_none() {
        run_synth(&ws).context("stage synth")?;
    }
    run_train_kg(&ws).context("stage train-kg")?;
    run_eval_kg(&ws).context("stage eval-kg")?;
    run_train_gen(&ws).context("stage train-gen")?;
    run_train_rr(&ws).context("stage train-rr")?;
    run_generate(&ws).context("stage generate")?;
    run_rerank(&ws).context("stage rerank")?;
    run_evaluate(&ws).context("stage evaluate")
}

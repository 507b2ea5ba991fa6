//! Pipeline configuration, JSON files and dotted-name overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rho_core::embed::{RankMode, TransEConfig};
use rho_core::generator::GeneratorConfig;
use rho_core::reranker::RerankerConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::synth::SynthConfig;

/// Input files; unset entries default to the standard names in the output
/// directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub kg: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub aliases: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Select among candidates with the re-ranker; otherwise keep the top beam.
    pub rerank: bool,
    /// `k` for the path-recovery Hits@k line of the report.
    pub path_hits_k: usize,
    pub kg_mode: RankMode,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { rerank: true, path_hits_k: 1, kg_mode: RankMode::Filter }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub transe: TransEConfig,
    pub generator: GeneratorConfig,
    pub reranker: RerankerConfig,
    pub evaluation: EvaluationConfig,
}


/// Stage order; a stage's seed is the global seed plus its index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth = 0,
    TrainKg = 1,
    TrainGen = 2,
    TrainRr = 3,
}

impl PipelineConfig {
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed.wrapping_add(stage as u64)
    }

    /// Sub-configurations with their derived seeds filled in.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.transe.seed = self.stage_seed(Stage::TrainKg);
        c.generator.seed = self.stage_seed(Stage::TrainGen);
        c.reranker.seed = self.stage_seed(Stage::TrainRr);
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.transe.validate().context("transe")?;
        self.generator.validate().context("generator")?;
        self.reranker.validate().context("reranker")?;
        if self.evaluation.path_hits_k == 0 || self.evaluation.path_hits_k > self.reranker.beam_width {
            bail!("evaluation.path_hits_k must be in 1..=reranker.beam_width");
        }
        let p = &self.paths;
        let splits: Vec<&PathBuf> = [&p.train, &p.valid, &p.test].into_iter().flatten().collect();
        for (i, a) in splits.iter().enumerate() {
            if splits[i + 1..].contains(a) {
                bail!("corpus splits must be distinct files; `{}` is used twice", a.display());
            }
        }
        Ok(())
    }

    /// Loads `file` (if any) over the defaults, then applies `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(f) = file {
            let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
            let user: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", f.display()))?;
            merge(&mut value, user, "")?;
        }
        for (key, raw) in overrides {
            set_dotted(&mut value, key, raw)?;
        }
        let cfg: Self = serde_json::from_value(value).context("invalid configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn merge(base: &mut Value, top: Value, prefix: &str) -> Result<()> {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| anyhow!("unknown config key `{name}`"))?;
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &name)?;
                } else {
                    *slot = v;
                }
            }
            Ok(())
        }
        (b, t) => {
            *b = t;
            Ok(())
        }
    }
}

/// Sets `a.b.c` to `raw`, read as JSON when it parses and as a string otherwise.
pub fn set_dotted(value: &mut Value, key: &str, raw: &str) -> Result<()> {
    let mut slot = value;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| anyhow!("unknown config key `{key}`"))?;
    }
    if slot.is_object() {
        bail!("config key `{key}` is a section, not a value");
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Splits `--a.b value` / `--a.b=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a.strip_prefix("--").ok_or_else(|| anyhow!("expected `--key value`, got `{a}`"))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let v = it.next().ok_or_else(|| anyhow!("missing value for `--{key}`"))?;
            out.push((key.to_string(), v.clone()));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let o = parse_overrides(&["--transe.epochs".into(), "7".into(), "--generator.grounding=false".into()]).unwrap();
        let c = PipelineConfig::load(None, &o).unwrap();
        assert_eq!(c.transe.epochs, 7);
        assert!(!c.generator.grounding);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let o = vec![("transe.epoch".to_string(), "7".to_string())];
        assert!(PipelineConfig::load(None, &o).is_err());
        assert!(parse_overrides(&["--seed".into()]).is_err());
        assert!(parse_overrides(&["seed".into(), "1".into()]).is_err());
    }

    #[test]
    fn path_override_is_a_string() {
        let o = vec![("paths.kg".to_string(), "data/kg.tsv".to_string())];
        let c = PipelineConfig::load(None, &o).unwrap();
        assert_eq!(c.paths.kg.as_deref(), Some(Path::new("data/kg.tsv")));
    }

    #[test]
    fn stage_seeds_follow_global_seed() {
        let c = PipelineConfig { seed: 10, ..PipelineConfig::default() }.resolved();
        assert_eq!((c.transe.seed, c.generator.seed, c.reranker.seed), (11, 12, 13));
    }

    #[test]
    fn invalid_sub_config_fails() {
        let o = vec![("generator.heads".to_string(), "3".to_string())];
        assert!(PipelineConfig::load(None, &o).is_err());
        let o = vec![("paths.train".to_string(), "a".to_string()), ("paths.test".to_string(), "a".to_string())];
        assert!(PipelineConfig::load(None, &o).is_err());
    }
}

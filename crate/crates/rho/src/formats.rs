//! On-disk formats: KG TSV, corpus JSONL, embedding tables, alias sidecars
//! and versioned model containers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rho_core::embed::KgEmbeddingTable;
use rho_core::kg::{KnowledgeGraph, NamedTriple};
use rho_core::linking::{AliasLexicon, LinkKind};
use rho_core::prompting::{DialogueSample, SampleRecord};
use rho_core::tensor::Matrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const MODEL_FORMAT_VERSION: u32 = 1;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// `subject<TAB>predicate<TAB>object` per line; blank and `#` lines skipped.
pub fn parse_kg_tsv(text: &str) -> Result<Vec<NamedTriple>> {
    data_lines(text)
        .map(|(n, line)| {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                bail!(rho_core::Error::Parse { line: n, message: format!("expected 3 tab-separated fields, got {}", cols.len()) });
            }
            Ok(NamedTriple::new(cols[0], cols[1], cols[2]))
        })
        .collect()
}

pub fn read_kg(path: &Path) -> Result<KnowledgeGraph> {
    let triples = parse_kg_tsv(&read(path)?).with_context(|| format!("parsing {}", path.display()))?;
    Ok(KnowledgeGraph::from_named(&triples)?)
}

pub fn kg_to_tsv(kg: &KnowledgeGraph) -> String {
    let mut out = String::new();
    for t in kg.triples() {
        let n = kg.named(t);
        let _ = writeln!(out, "{}\t{}\t{}", n.subject, n.predicate, n.object);
    }
    out
}

pub fn write_kg(path: &Path, kg: &KnowledgeGraph) -> Result<()> {
    write(path, &kg_to_tsv(kg))
}

pub fn parse_corpus(text: &str) -> Result<Vec<SampleRecord>> {
    data_lines(text)
        .map(|(n, line)| serde_json::from_str(line).with_context(|| format!("line {n}")))
        .collect()
}

pub fn corpus_to_jsonl(records: &[SampleRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<SampleRecord>> {
    parse_corpus(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

/// Reads a corpus and validates every path against `kg`.
pub fn read_corpus(path: &Path, kg: &KnowledgeGraph) -> Result<Vec<DialogueSample>> {
    read_records(path)?
        .iter()
        .enumerate()
        .map(|(i, r)| DialogueSample::from_record(r, kg).with_context(|| format!("{} sample {}", path.display(), i + 1)))
        .collect()
}

pub fn write_records(path: &Path, records: &[SampleRecord]) -> Result<()> {
    write(path, &corpus_to_jsonl(records)?)
}

fn join_floats(v: &[f64]) -> String {
    let mut s = String::new();
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{x:?}");
    }
    s
}

/// `d_kg=<n>` header, then `E`/`R` lines with shortest round-trip decimals.
pub fn table_to_text(kg: &KnowledgeGraph, table: &KgEmbeddingTable) -> String {
    let mut out = format!("d_kg={}\n", table.d_kg());
    for e in kg.entity_ids() {
        let _ = writeln!(out, "E\t{}\t{}", kg.entity_name(e), join_floats(table.entities().row(e.index())));
    }
    for r in kg.relation_ids() {
        let _ = writeln!(out, "R\t{}\t{}", kg.relation_name(r), join_floats(table.relations().row(r.index())));
    }
    out
}

pub fn parse_table(text: &str, kg: &KnowledgeGraph) -> Result<KgEmbeddingTable> {
    let mut lines = data_lines(text);
    let (_, header) = lines.next().ok_or_else(|| anyhow!("embedding table is empty"))?;
    let d: usize = header
        .strip_prefix("d_kg=")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| anyhow!("line 1: expected `d_kg=<n>` header"))?;
    let mut entities = Matrix::zeros(kg.entity_count(), d);
    let mut relations = Matrix::zeros(kg.relation_count(), d);
    let mut seen_e = vec![false; kg.entity_count()];
    let mut seen_r = vec![false; kg.relation_count()];
    for (n, line) in lines {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            bail!("line {n}: expected 3 tab-separated fields");
        }
        let values = cols[2]
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| anyhow!("line {n}: {e}")))
            .collect::<Result<Vec<_>>>()?;
        if values.len() != d {
            bail!(rho_core::Error::DimensionMismatch { expected: d, got: values.len() });
        }
        match cols[0] {
            "E" => {
                let Ok(id) = kg.entity(cols[1]) else { continue };
                entities.row_mut(id.index()).copy_from_slice(&values);
                seen_e[id.index()] = true;
            }
            "R" => {
                let Ok(id) = kg.relation(cols[1]) else { continue };
                relations.row_mut(id.index()).copy_from_slice(&values);
                seen_r[id.index()] = true;
            }
            other => bail!("line {n}: unknown row kind `{other}`"),
        }
    }
    if let Some(i) = seen_e.iter().position(|s| !s) {
        bail!(rho_core::Error::MissingEmbedding(format!("entity `{}`", kg.entity_names()[i])));
    }
    if let Some(i) = seen_r.iter().position(|s| !s) {
        bail!(rho_core::Error::MissingEmbedding(format!("relation `{}`", kg.relation_names()[i])));
    }
    Ok(KgEmbeddingTable::new(entities, relations)?)
}

pub fn read_table(path: &Path, kg: &KnowledgeGraph) -> Result<KgEmbeddingTable> {
    parse_table(&read(path)?, kg).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_table(path: &Path, kg: &KnowledgeGraph, table: &KgEmbeddingTable) -> Result<()> {
    write(path, &table_to_text(kg, table))
}

/// Extra aliases, `entity|relation<TAB>alias<TAB>canonical name` per line.
pub fn apply_aliases(text: &str, kg: &KnowledgeGraph, lexicon: &mut AliasLexicon) -> Result<()> {
    for (n, line) in data_lines(text) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            bail!("line {n}: expected 3 tab-separated fields");
        }
        let kind = match cols[0] {
            "entity" => LinkKind::Entity,
            "relation" => LinkKind::Relation,
            other => bail!("line {n}: unknown alias kind `{other}`"),
        };
        lexicon.add_alias(kind, cols[1], cols[2], kg).with_context(|| format!("line {n}"))?;
    }
    Ok(())
}

/// Lexicon from the graph names plus an optional sidecar file.
pub fn load_lexicon(kg: &KnowledgeGraph, aliases: Option<&Path>) -> Result<AliasLexicon> {
    let mut lex = AliasLexicon::build(kg)?;
    for w in lex.warnings() {
        log::warn!("alias `{}` is shared; keeping {:?} over {:?}", w.key, w.kept, w.dropped);
    }
    if let Some(p) = aliases {
        apply_aliases(&read(p)?, kg, &mut lex).with_context(|| format!("parsing {}", p.display()))?;
    }
    Ok(lex)
}

#[derive(Serialize, Deserialize)]
struct Container<T> {
    format: String,
    version: u32,
    kind: String,
    model: T,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
}

const FORMAT_TAG: &str = "rho-model";

pub fn model_to_json<T: Serialize>(kind: &str, model: &T) -> Result<String> {
    let c = Container { format: FORMAT_TAG.into(), version: MODEL_FORMAT_VERSION, kind: kind.into(), model };
    Ok(serde_json::to_string(&c)?)
}

/// Parses a container, checking format tag, version and model kind first.
pub fn model_from_json<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T> {
    let h: Header = serde_json::from_str(text).context("not a model container")?;
    if h.format != FORMAT_TAG {
        bail!("not a model container (format `{}`)", h.format);
    }
    if h.version != MODEL_FORMAT_VERSION {
        bail!("model file version {} is not supported (expected {})", h.version, MODEL_FORMAT_VERSION);
    }
    if h.kind != kind {
        bail!("expected a {kind} model, found {}", h.kind);
    }
    let c: Container<T> = serde_json::from_str(text)?;
    Ok(c.model)
}

pub fn save_model<T: Serialize>(path: &Path, kind: &str, model: &T) -> Result<()> {
    write(path, &model_to_json(kind, model)?)
}

pub fn load_model<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    model_from_json(kind, &read(path)?).with_context(|| format!("loading {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, &s)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).with_context(|| format!("parsing {}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write(path, &out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    data_lines(&read(path)?)
        .map(|(n, l)| serde_json::from_str(l).with_context(|| format!("{} line {n}", path.display())))
        .collect()
}

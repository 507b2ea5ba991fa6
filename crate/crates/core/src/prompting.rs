//! Knowledge-guided input template, rule-based tokenizer and vocabulary.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::kg::{KnowledgeGraph, NamedTriple, SubGraph};
use crate::linking::{AliasLexicon, LinkedSpan, NodeRef};
use crate::text::{is_marker, is_word_char, split_pieces, MARKERS};
use crate::{Error, Result};

/// Utterances kept from the end of the history.
pub const MAX_HISTORY: usize = 3;

pub const TEMPLATE_PREFIX: &str = "Given the knowledge: ";

const ZWJ: char = '\u{200D}';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Assistant,
}

impl Speaker {
    pub fn marker(self) -> &'static str {
        match self {
            Speaker::User => "<user>",
            Speaker::Assistant => "<assistant>",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

impl Utterance {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Self { speaker, text: text.into() }
    }
}

/// One corpus line as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub history: Vec<Utterance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    pub path: Vec<NamedTriple>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueSample {
    history: Vec<Utterance>,
    response: Option<String>,
    sub_graph: SubGraph,
}

impl DialogueSample {
    /// Keeps the [`MAX_HISTORY`] most recent utterances.
    pub fn new(history: Vec<Utterance>, response: Option<String>, sub_graph: SubGraph) -> Result<Self> {
        if history.is_empty() {
            return Err(Error::InvalidSample("history is empty".into()));
        }
        let skip = history.len().saturating_sub(MAX_HISTORY);
        let history = history.into_iter().skip(skip).collect();
        Ok(Self { history, response, sub_graph })
    }

    pub fn from_record(record: &SampleRecord, kg: &KnowledgeGraph) -> Result<Self> {
        let sub_graph = kg.validate_named_path(&record.path)?;
        Self::new(record.history.clone(), record.response.clone(), sub_graph)
    }

    pub fn to_record(&self, kg: &KnowledgeGraph) -> SampleRecord {
        SampleRecord {
            history: self.history.clone(),
            response: self.response.clone(),
            path: self.sub_graph.path().iter().map(|t| kg.named(t)).collect(),
        }
    }

    pub fn history(&self) -> &[Utterance] {
        &self.history
    }

    pub fn response(&self) -> Option<&str> {
        self.response.as_deref()
    }

    pub fn sub_graph(&self) -> &SubGraph {
        &self.sub_graph
    }

    pub fn named_path(&self, kg: &KnowledgeGraph) -> Vec<NamedTriple> {
        self.sub_graph.path().iter().map(|t| kg.named(t)).collect()
    }

    /// The template text fed to the encoder.
    pub fn serialize(&self, kg: &KnowledgeGraph) -> String {
        serialize_input(&self.named_path(kg), &self.history)
    }

    /// History alone with speaker markers, as seen by the re-ranker.
    pub fn history_text(&self) -> String {
        let mut out = String::new();
        for (i, u) in self.history.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(u.speaker.marker());
            out.push(' ');
            out.push_str(&escape_markers(&u.text));
        }
        out
    }
}

/// Inserts a zero-width joiner after `<` of every literal marker so user
/// text cannot inject template structure. Already-escaped sequences get one
/// more joiner, which keeps the mapping invertible.
pub fn escape_markers(s: &str) -> String {
    rewrite_markers(s, true)
}

/// Inverse of [`escape_markers`].
pub fn unescape_markers(s: &str) -> String {
    rewrite_markers(s, false)
}

fn rewrite_markers(s: &str, escape: bool) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(pos) = rest.find('<') {
        out.push_str(&rest[..pos]);
        let after = &rest[pos + 1..];
        let joiners = after.chars().take_while(|&c| c == ZWJ).count();
        let tail = &after[joiners * ZWJ.len_utf8()..];
        let is_marker = MARKERS.iter().any(|m| tail.starts_with(&m[1..]));
        out.push('<');
        let keep = match (is_marker, escape) {
            (true, true) => joiners + 1,
            (true, false) if joiners > 0 => joiners - 1,
            _ => joiners,
        };
        (0..keep).for_each(|_| out.push(ZWJ));
        rest = tail;
    }
    out.push_str(rest);
    out
}

/// `Given the knowledge: S1 <sep> P1 <sep> O1 <triple> ... <user> U1 <assistant> U2 ...`
pub fn serialize_input(triples: &[NamedTriple], history: &[Utterance]) -> String {
    let mut out = String::from(TEMPLATE_PREFIX);
    for (i, t) in triples.iter().enumerate() {
        if i > 0 {
            out.push_str(" <triple> ");
        }
        out.push_str(&escape_markers(&t.subject));
        out.push_str(" <sep> ");
        out.push_str(&escape_markers(&t.predicate));
        out.push_str(" <sep> ");
        out.push_str(&escape_markers(&t.object));
    }
    for u in history {
        out.push(' ');
        out.push_str(u.speaker.marker());
        out.push(' ');
        out.push_str(&escape_markers(&u.text));
    }
    out
}

fn next_speaker_marker(s: &str) -> Option<(usize, Speaker, usize)> {
    let user = s.find(" <user> ").map(|i| (i, Speaker::User, " <user> ".len()));
    let asst = s.find(" <assistant> ").map(|i| (i, Speaker::Assistant, " <assistant> ".len()));
    match (user, asst) {
        (Some(u), Some(a)) => Some(if u.0 < a.0 { u } else { a }),
        (u, a) => u.or(a),
    }
}

/// Recovers triples and utterances from [`serialize_input`] output.
pub fn parse_input(s: &str) -> Result<(Vec<NamedTriple>, Vec<Utterance>)> {
    let bad = |m: &str| Error::Parse { line: 1, message: m.to_string() };
    let body = s.strip_prefix(TEMPLATE_PREFIX).ok_or_else(|| bad("missing template prefix"))?;
    let (knowledge, mut rest) = match next_speaker_marker(body) {
        Some((i, _, _)) => (&body[..i], &body[i..]),
        None => (body, ""),
    };
    let mut triples = Vec::new();
    for part in knowledge.split(" <triple> ") {
        let fields: Vec<&str> = part.split(" <sep> ").collect();
        if fields.len() != 3 {
            return Err(bad("triple does not have three fields"));
        }
        triples.push(NamedTriple::new(
            unescape_markers(fields[0]),
            unescape_markers(fields[1]),
            unescape_markers(fields[2]),
        ));
    }
    let mut history = Vec::new();
    while let Some((0, speaker, len)) = next_speaker_marker(rest) {
        let after = &rest[len..];
        let end = next_speaker_marker(after).map_or(after.len(), |(i, _, _)| i);
        history.push(Utterance::new(speaker, unescape_markers(&after[..end])));
        rest = &after[end..];
    }
    if !rest.is_empty() {
        return Err(bad("trailing text after history"));
    }
    Ok((triples, history))
}

pub const SEP: u32 = 0;
pub const TRIPLE: u32 = 1;
pub const USER: u32 = 2;
pub const ASSISTANT: u32 = 3;
pub const PAD: u32 = 4;
pub const BOS: u32 = 5;
pub const EOS: u32 = 6;
pub const UNK: u32 = 7;

/// Token table. Ids 0-6 are the template markers in [`MARKERS`] order and
/// id 7 is `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let mut v = Self::new();
        for t in tokens {
            v.add(&t);
        }
        v
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn new() -> Self {
        let mut v = Self { tokens: Vec::new(), index: BTreeMap::new() };
        for m in MARKERS {
            v.add(m);
        }
        v.add("<unk>");
        v
    }

    pub fn add(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Adds every token of `text`.
    pub fn observe(&mut self, text: &str) {
        for p in split_pieces(text) {
            self.add(p.text);
        }
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Token ids with their source spans and per-token node links.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    /// Byte span of each token in the tokenized text.
    pub surface: Vec<(usize, usize)>,
    pub link: Vec<Option<NodeRef>>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_linked(&self, i: usize) -> bool {
        self.link[i].is_some()
    }

    /// Rebuilds whitespace-normalized text, spacing tokens that were apart.
    pub fn detokenize(&self, vocab: &Vocab) -> String {
        let mut out = String::new();
        for (i, &t) in self.tokens.iter().enumerate() {
            if i > 0 && self.surface[i - 1].1 < self.surface[i].0 {
                out.push(' ');
            }
            out.push_str(vocab.token(t));
        }
        out
    }
}

/// Splits `text` and links each token fully inside a span of `spans`.
/// Marker tokens never carry a link.
pub fn tokenize(text: &str, spans: &[LinkedSpan], vocab: &Vocab) -> TokenSequence {
    let pieces = split_pieces(text);
    let mut seq = TokenSequence {
        tokens: Vec::with_capacity(pieces.len()),
        surface: Vec::with_capacity(pieces.len()),
        link: Vec::with_capacity(pieces.len()),
    };
    for p in pieces {
        seq.tokens.push(vocab.id(p.text));
        seq.surface.push((p.start, p.end));
        let link = if is_marker(p.text) {
            None
        } else {
            spans.iter().find(|s| s.contains(p.start, p.end)).map(|s| s.node)
        };
        seq.link.push(link);
    }
    seq
}

/// Token ids of `text` without links.
pub fn encode(text: &str, vocab: &Vocab) -> Vec<u32> {
    split_pieces(text).iter().map(|p| vocab.id(p.text)).collect()
}

/// Joins generated tokens into text whose re-tokenization gives the same
/// tokens: adjacent word tokens are always separated by a space.
pub fn join_tokens(ids: &[u32], vocab: &Vocab) -> String {
    let no_space_before = |t: &str| matches!(t, "." | "," | "?" | "!" | ";" | ":" | ")" | "'" | "-");
    let no_space_after = |t: &str| matches!(t, "(" | "-" | "'");
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for &id in ids {
        let t = vocab.token(id);
        if let Some(p) = prev {
            let words = p.chars().all(is_word_char) && t.chars().all(is_word_char);
            if words || !(no_space_before(t) || no_space_after(p)) {
                out.push(' ');
            }
        }
        out.push_str(t);
        prev = Some(t);
    }
    out
}

/// Serializes `sample`, links mentions against the sample's own sub-graph
/// vocabulary and tokenizes the result.
pub fn prepare_input(sample: &DialogueSample, kg: &KnowledgeGraph, lexicon: &AliasLexicon, vocab: &Vocab) -> TokenSequence {
    let text = sample.serialize(kg);
    let local = lexicon.restrict(&sample.sub_graph().entities(), &sample.sub_graph().relations());
    let spans = local.link(&text);
    tokenize(&text, &spans, vocab)
}

/// Describes a token for diagnostics.
pub fn describe_token(vocab: &Vocab, id: u32) -> String {
    format!("{}#{}", vocab.token(id), id)
}

//! Closed-world mention linking by greedy longest match over an alias
//! dictionary.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::kg::{EntityId, KnowledgeGraph, RelationId};
use crate::text::{normalize_key, split_pieces, Piece};
use crate::{Error, Result};

/// Trailing words dropped to form the stem alias of a relation
/// (`directed_by` is also reachable as "directed").
const PREPOSITION_TAILS: [&str; 11] = ["by", "of", "in", "on", "at", "for", "to", "with", "from", "as", "into"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeRef {
    Entity(EntityId),
    Relation(RelationId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkKind {
    Entity,
    Relation,
}

impl NodeRef {
    pub fn kind(self) -> LinkKind {
        match self {
            NodeRef::Entity(_) => LinkKind::Entity,
            NodeRef::Relation(_) => LinkKind::Relation,
        }
    }
}

/// A linked mention. Offsets are byte offsets into the linked text, `end` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkedSpan {
    pub start: usize,
    pub end: usize,
    pub node: NodeRef,
}

impl LinkedSpan {
    pub fn kind(&self) -> LinkKind {
        self.node.kind()
    }

    pub fn contains(&self, start: usize, end: usize) -> bool {
        self.start <= start && end <= self.end
    }
}

/// A dropped alias: two nodes of the same kind normalized to one key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AliasWarning {
    pub key: String,
    pub kept: NodeRef,
    pub dropped: NodeRef,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AliasLexicon {
    entity_aliases: BTreeMap<String, EntityId>,
    relation_aliases: BTreeMap<String, RelationId>,
    /// First piece of every key mapped to the longest key length in pieces.
    prefixes: BTreeMap<String, usize>,
    warnings: Vec<AliasWarning>,
}

/// Alias keys generated for a relation name: raw, underscore-split, and the
/// split form minus a trailing preposition.
pub fn relation_keys(name: &str) -> Vec<String> {
    let raw = normalize_key(name);
    let split = normalize_key(&name.replace('_', " "));
    let mut keys = alloc::vec![raw.clone()];
    if split != raw {
        keys.push(split.clone());
    }
    let words: Vec<&str> = split.split(' ').collect();
    if words.len() > 1 && PREPOSITION_TAILS.contains(words.last().unwrap()) {
        let stem = words[..words.len() - 1].join(" ");
        if !keys.contains(&stem) {
            keys.push(stem);
        }
    }
    keys
}

impl AliasLexicon {
    pub fn build(kg: &KnowledgeGraph) -> Result<Self> {
        let mut lex = Self::default();
        for id in kg.entity_ids() {
            lex.insert_entity(normalize_key(kg.entity_name(id)), id);
        }
        let mut collisions = Vec::new();
        for id in kg.relation_ids() {
            for key in relation_keys(kg.relation_name(id)) {
                if let Some(&e) = lex.entity_aliases.get(&key) {
                    collisions.push(format!("`{}` / `{}`", kg.entity_name(e), kg.relation_name(id)));
                    continue;
                }
                lex.insert_relation(key, id);
            }
        }
        if !collisions.is_empty() {
            return Err(Error::AliasCollision(collisions.join(", ")));
        }
        Ok(lex)
    }

    fn insert_entity(&mut self, key: String, id: EntityId) {
        if key.is_empty() {
            return;
        }
        match self.entity_aliases.get(&key) {
            Some(&kept) if kept != id => {
                let (kept, dropped) = if kept < id { (kept, id) } else { (id, kept) };
                self.entity_aliases.insert(key.clone(), kept);
                self.warnings.push(AliasWarning { key, kept: NodeRef::Entity(kept), dropped: NodeRef::Entity(dropped) });
            }
            Some(_) => {}
            None => {
                self.note_prefix(&key);
                self.entity_aliases.insert(key, id);
            }
        }
    }

    fn insert_relation(&mut self, key: String, id: RelationId) {
        if key.is_empty() {
            return;
        }
        match self.relation_aliases.get(&key) {
            Some(&kept) if kept != id => {
                let (kept, dropped) = if kept < id { (kept, id) } else { (id, kept) };
                self.relation_aliases.insert(key.clone(), kept);
                self.warnings.push(AliasWarning {
                    key,
                    kept: NodeRef::Relation(kept),
                    dropped: NodeRef::Relation(dropped),
                });
            }
            Some(_) => {}
            None => {
                self.note_prefix(&key);
                self.relation_aliases.insert(key, id);
            }
        }
    }

    fn note_prefix(&mut self, key: &str) {
        let pieces = split_pieces(key);
        if let Some(first) = pieces.first() {
            let slot = self.prefixes.entry(first.text.to_string()).or_insert(0);
            *slot = (*slot).max(pieces.len());
        }
    }

    /// Merges one extra alias (sidecar entry). The alias must not collide
    /// with a key of the other kind; a same-kind key is re-pointed.
    pub fn add_alias(&mut self, kind: LinkKind, alias: &str, canonical: &str, kg: &KnowledgeGraph) -> Result<()> {
        let key = normalize_key(alias);
        match kind {
            LinkKind::Entity => {
                let id = kg.entity(canonical)?;
                if self.relation_aliases.contains_key(&key) {
                    return Err(Error::AliasCollision(format!("`{alias}` is already a relation alias")));
                }
                self.note_prefix(&key);
                self.entity_aliases.insert(key, id);
            }
            LinkKind::Relation => {
                let id = kg.relation(canonical)?;
                if self.entity_aliases.contains_key(&key) {
                    return Err(Error::AliasCollision(format!("`{alias}` is already an entity alias")));
                }
                self.note_prefix(&key);
                self.relation_aliases.insert(key, id);
            }
        }
        Ok(())
    }

    /// Keeps only aliases pointing at the given nodes.
    pub fn restrict(&self, entities: &[EntityId], relations: &[RelationId]) -> Self {
        let mut out = Self::default();
        for (k, v) in &self.entity_aliases {
            if entities.contains(v) {
                out.note_prefix(k);
                out.entity_aliases.insert(k.clone(), *v);
            }
        }
        for (k, v) in &self.relation_aliases {
            if relations.contains(v) {
                out.note_prefix(k);
                out.relation_aliases.insert(k.clone(), *v);
            }
        }
        out
    }

    pub fn lookup(&self, key: &str) -> Option<NodeRef> {
        self.entity_aliases
            .get(key)
            .map(|&e| NodeRef::Entity(e))
            .or_else(|| self.relation_aliases.get(key).map(|&r| NodeRef::Relation(r)))
    }

    pub fn entity_aliases(&self) -> &BTreeMap<String, EntityId> {
        &self.entity_aliases
    }

    pub fn relation_aliases(&self) -> &BTreeMap<String, RelationId> {
        &self.relation_aliases
    }

    pub fn warnings(&self) -> &[AliasWarning] {
        &self.warnings
    }

    /// Greedy left-to-right longest match on piece boundaries, case-insensitive.
    pub fn link(&self, text: &str) -> Vec<LinkedSpan> {
        let pieces = split_pieces(text);
        let mut spans = Vec::new();
        let mut i = 0;
        while i < pieces.len() {
            match self.longest_at(text, &pieces, i) {
                Some((n, node)) => {
                    spans.push(LinkedSpan { start: pieces[i].start, end: pieces[i + n - 1].end, node });
                    i += n;
                }
                None => i += 1,
            }
        }
        spans
    }

    fn longest_at(&self, text: &str, pieces: &[Piece<'_>], i: usize) -> Option<(usize, NodeRef)> {
        let first = pieces[i].text.to_lowercase();
        let max = *self.prefixes.get(&first)?;
        let max = max.min(pieces.len() - i);
        (1..=max).rev().find_map(|n| {
            let surface = &text[pieces[i].start..pieces[i + n - 1].end];
            self.lookup(&normalize_key(surface)).map(|node| (n, node))
        })
    }
}

/// Links `text` against `lexicon`.
pub fn link_mentions(text: &str, lexicon: &AliasLexicon) -> Vec<LinkedSpan> {
    lexicon.link(text)
}

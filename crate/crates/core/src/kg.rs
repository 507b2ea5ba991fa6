//! Multi-relational knowledge graph, annotated sub-graph paths and the
//! walker's action space.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::text::normalize_name;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelationId(pub u32);

impl RelationId {
    /// Reserved id carried by STOP actions. Never assigned to a graph relation.
    pub const STOP: RelationId = RelationId(u32::MAX);
}

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: EntityId,
    pub predicate: RelationId,
    pub object: EntityId,
}

/// A triple keyed by surface names, as stored in files.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NamedTriple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl NamedTriple {
    pub fn new(subject: impl Into<String>, predicate: impl Into<String>, object: impl Into<String>) -> Self {
        Self { subject: subject.into(), predicate: predicate.into(), object: object.into() }
    }
}

/// Immutable directed multi-relational graph.
///
/// Ids are dense and assigned in first-appearance order. Triples keep their
/// insertion order, which fixes the order of walker actions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    entities: Vec<String>,
    relations: Vec<String>,
    entity_index: BTreeMap<String, EntityId>,
    relation_index: BTreeMap<String, RelationId>,
    triples: Vec<Triple>,
    triple_set: BTreeSet<Triple>,
    outgoing: Vec<Vec<usize>>,
    incoming: Vec<Vec<usize>>,
}

impl KnowledgeGraph {
    /// Builds a graph from `(subject, relation, object)` name records.
    ///
    /// Names are trimmed and whitespace-collapsed; duplicate triples are
    /// dropped. A record with an empty field fails with its 1-based index.
    pub fn from_records<I, S>(records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, S, S)>,
        S: AsRef<str>,
    {
        let mut graph = Self {
            entities: Vec::new(),
            relations: Vec::new(),
            entity_index: BTreeMap::new(),
            relation_index: BTreeMap::new(),
            triples: Vec::new(),
            triple_set: BTreeSet::new(),
            outgoing: Vec::new(),
            incoming: Vec::new(),
        };
        for (i, (s, p, o)) in records.into_iter().enumerate() {
            let (s, p, o) = (normalize_name(s.as_ref()), normalize_name(p.as_ref()), normalize_name(o.as_ref()));
            if s.is_empty() || p.is_empty() || o.is_empty() {
                return Err(Error::Parse { line: i + 1, message: "empty field".to_string() });
            }
            let subject = graph.intern_entity(s);
            let predicate = graph.intern_relation(p);
            let object = graph.intern_entity(o);
            graph.insert(Triple { subject, predicate, object });
        }
        if graph.triples.is_empty() {
            return Err(Error::EmptyGraph);
        }
        Ok(graph)
    }

    pub fn from_named(triples: &[NamedTriple]) -> Result<Self> {
        Self::from_records(triples.iter().map(|t| (t.subject.as_str(), t.predicate.as_str(), t.object.as_str())))
    }

    fn intern_entity(&mut self, name: String) -> EntityId {
        if let Some(&id) = self.entity_index.get(&name) {
            return id;
        }
        let id = EntityId(self.entities.len() as u32);
        self.entities.push(name.clone());
        self.entity_index.insert(name, id);
        self.outgoing.push(Vec::new());
        self.incoming.push(Vec::new());
        id
    }

    fn intern_relation(&mut self, name: String) -> RelationId {
        if let Some(&id) = self.relation_index.get(&name) {
            return id;
        }
        let id = RelationId(self.relations.len() as u32);
        self.relations.push(name.clone());
        self.relation_index.insert(name, id);
        id
    }

    fn insert(&mut self, t: Triple) {
        if self.triple_set.insert(t) {
            let idx = self.triples.len();
            self.triples.push(t);
            self.outgoing[t.subject.index()].push(idx);
            self.incoming[t.object.index()].push(idx);
        }
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn relation_count(&self) -> usize {
        self.relations.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.triple_set.contains(t)
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        &self.entities[id.index()]
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        if id == RelationId::STOP {
            return "STOP";
        }
        &self.relations[id.index()]
    }

    pub fn entity_names(&self) -> &[String] {
        &self.entities
    }

    pub fn relation_names(&self) -> &[String] {
        &self.relations
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> {
        (0..self.entities.len() as u32).map(EntityId)
    }

    pub fn relation_ids(&self) -> impl Iterator<Item = RelationId> {
        (0..self.relations.len() as u32).map(RelationId)
    }

    pub fn entity(&self, name: &str) -> Result<EntityId> {
        self.entity_index.get(&normalize_name(name)).copied().ok_or_else(|| Error::UnknownEntity(name.to_string()))
    }

    pub fn relation(&self, name: &str) -> Result<RelationId> {
        self.relation_index
            .get(&normalize_name(name))
            .copied()
            .ok_or_else(|| Error::UnknownRelation(name.to_string()))
    }

    pub fn resolve(&self, t: &NamedTriple) -> Result<Triple> {
        let triple = Triple {
            subject: self.entity(&t.subject)?,
            predicate: self.relation(&t.predicate)?,
            object: self.entity(&t.object)?,
        };
        if !self.contains(&triple) {
            return Err(Error::UnknownTriple(t.subject.clone(), t.predicate.clone(), t.object.clone()));
        }
        Ok(triple)
    }

    pub fn named(&self, t: &Triple) -> NamedTriple {
        NamedTriple::new(self.entity_name(t.subject), self.relation_name(t.predicate), self.entity_name(t.object))
    }

    pub fn out_degree(&self, e: EntityId) -> usize {
        self.outgoing[e.index()].len()
    }

    pub fn in_degree(&self, e: EntityId) -> usize {
        self.incoming[e.index()].len()
    }

    /// Forward edges, then inverse edges, then exactly one STOP.
    pub fn outgoing_actions(&self, entity: EntityId) -> Result<Vec<Action>> {
        if entity.index() >= self.entities.len() {
            return Err(Error::UnknownEntity(format!("#{}", entity.0)));
        }
        let e = entity.index();
        let mut actions = Vec::with_capacity(self.outgoing[e].len() + self.incoming[e].len() + 1);
        for &ti in &self.outgoing[e] {
            let t = self.triples[ti];
            actions.push(Action::forward(t.predicate, t.object));
        }
        for &ti in &self.incoming[e] {
            let t = self.triples[ti];
            actions.push(Action::inverse(t.predicate, t.subject));
        }
        actions.push(Action::stop(entity));
        Ok(actions)
    }

    /// Checks that `path` consists of graph triples that chain into a walk.
    ///
    /// The walk starts at the first triple's subject. Each later triple must
    /// touch the current entity, forward (as subject) or inverse (as object).
    pub fn validate_path(&self, path: &[Triple]) -> Result<SubGraph> {
        let first = path.first().ok_or(Error::EmptyPath)?;
        for t in path {
            if !self.contains(t) {
                let n = self.named(t);
                return Err(Error::UnknownTriple(n.subject, n.predicate, n.object));
            }
        }
        let mut current = first.subject;
        for (i, t) in path.iter().enumerate() {
            current = step_through(t, current).ok_or_else(|| Error::BrokenChain {
                index: i,
                message: format!(
                    "<{}, {}, {}> does not touch `{}`",
                    self.entity_name(t.subject),
                    self.relation_name(t.predicate),
                    self.entity_name(t.object),
                    self.entity_name(current)
                ),
            })?;
        }
        Ok(SubGraph { path: path.to_vec() })
    }

    pub fn validate_named_path(&self, path: &[NamedTriple]) -> Result<SubGraph> {
        if path.is_empty() {
            return Err(Error::EmptyPath);
        }
        let triples = path.iter().map(|t| self.resolve(t)).collect::<Result<Vec<_>>>()?;
        self.validate_path(&triples)
    }
}

fn step_through(t: &Triple, current: EntityId) -> Option<EntityId> {
    if t.subject == current {
        Some(t.object)
    } else if t.object == current {
        Some(t.subject)
    } else {
        None
    }
}

/// An annotated, chained walk through the graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubGraph {
    path: Vec<Triple>,
}

impl SubGraph {
    pub fn path(&self) -> &[Triple] {
        &self.path
    }

    pub fn triple_count(&self) -> usize {
        self.path.len()
    }

    pub fn start(&self) -> EntityId {
        self.path[0].subject
    }

    /// The walk as a sequence of non-STOP actions.
    pub fn actions(&self) -> Vec<Action> {
        let mut current = self.start();
        self.path
            .iter()
            .map(|t| {
                if t.subject == current {
                    current = t.object;
                    Action::forward(t.predicate, t.object)
                } else {
                    current = t.subject;
                    Action::inverse(t.predicate, t.subject)
                }
            })
            .collect()
    }

    /// Distinct entities in path order of first appearance.
    pub fn entities(&self) -> Vec<EntityId> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for t in &self.path {
            for e in [t.subject, t.object] {
                if seen.insert(e) {
                    out.push(e);
                }
            }
        }
        out
    }

    pub fn relations(&self) -> Vec<RelationId> {
        let mut seen = BTreeSet::new();
        self.path.iter().map(|t| t.predicate).filter(|r| seen.insert(*r)).collect()
    }
}

/// One walker step: traverse `relation` (backwards when `inverse`) to `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Action {
    pub relation: RelationId,
    pub inverse: bool,
    pub target: EntityId,
    pub is_stop: bool,
}

impl Action {
    pub fn forward(relation: RelationId, target: EntityId) -> Self {
        Self { relation, inverse: false, target, is_stop: false }
    }

    pub fn inverse(relation: RelationId, target: EntityId) -> Self {
        Self { relation, inverse: true, target, is_stop: false }
    }

    pub fn stop(current: EntityId) -> Self {
        Self { relation: RelationId::STOP, inverse: false, target: current, is_stop: true }
    }

    pub fn describe(&self, kg: &KnowledgeGraph) -> String {
        if self.is_stop {
            return "STOP".to_string();
        }
        let tilde = if self.inverse { "~" } else { "" };
        format!("{tilde}{} -> {}", kg.relation_name(self.relation), kg.entity_name(self.target))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn fig3() -> KnowledgeGraph {
        KnowledgeGraph::from_records([
            ("X-Men 2", "directed_by", "Bryan Singer"),
            ("Superman Returns", "directed_by", "Bryan Singer"),
            ("X-Men 2", "starred_actors", "Patrick Stewart"),
        ])
        .unwrap()
    }

    #[test]
    fn single_triple_graph() {
        let kg = KnowledgeGraph::from_records([("X-Men 2", "directed_by", "Bryan Singer")]).unwrap();
        assert_eq!(kg.entity_count(), 2);
        assert_eq!(kg.relation_count(), 1);
        assert_eq!(kg.triples().len(), 1);
    }

    #[test]
    fn duplicates_are_dropped() {
        let kg = KnowledgeGraph::from_records([("a", "r", "b"), ("a", "r", "b")]).unwrap();
        assert_eq!(kg.triples().len(), 1);
    }

    #[test]
    fn names_are_whitespace_normalized() {
        let kg = KnowledgeGraph::from_records([("  X-Men   2 ", "r", "b")]).unwrap();
        assert_eq!(kg.entity_name(EntityId(0)), "X-Men 2");
        assert_eq!(kg.entity("X-Men 2").unwrap(), EntityId(0));
    }

    #[test]
    fn empty_input_and_empty_fields_fail() {
        let none: [(&str, &str, &str); 0] = [];
        assert_eq!(KnowledgeGraph::from_records(none), Err(Error::EmptyGraph));
        assert!(matches!(
            KnowledgeGraph::from_records([("a", "r", "b"), ("a", " ", "c")]),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn forward_adjacency_counts() {
        let kg = KnowledgeGraph::from_records([("A", "r", "B"), ("B", "s", "C"), ("A", "r", "C")]).unwrap();
        let a = kg.entity("A").unwrap();
        assert_eq!(kg.out_degree(a), 2);
        let forward = kg.outgoing_actions(a).unwrap().iter().filter(|x| !x.inverse && !x.is_stop).count();
        assert_eq!(forward, 2);
    }

    #[test]
    fn inverse_actions_at_bryan_singer() {
        let kg = fig3();
        let singer = kg.entity("Bryan Singer").unwrap();
        let actions = kg.outgoing_actions(singer).unwrap();
        let directed = kg.relation("directed_by").unwrap();
        for movie in ["Superman Returns", "X-Men 2"] {
            let target = kg.entity(movie).unwrap();
            assert!(actions.contains(&Action::inverse(directed, target)));
        }
        assert_eq!(actions.last(), Some(&Action::stop(singer)));
    }

    #[test]
    fn action_counts() {
        let kg = KnowledgeGraph::from_records([("a", "r", "b"), ("c", "s", "a"), ("x", "r", "x")]).unwrap();
        assert_eq!(kg.outgoing_actions(kg.entity("a").unwrap()).unwrap().len(), 3);
        // self-loop is both an out-edge and an in-edge
        assert_eq!(kg.outgoing_actions(kg.entity("x").unwrap()).unwrap().len(), 3);
        assert!(kg.outgoing_actions(EntityId(99)).is_err());
    }

    #[test]
    fn isolated_entity_has_only_stop() {
        // an entity with no triples cannot appear through loading; use the raw constructor
        let mut kg = KnowledgeGraph::from_records([("a", "r", "b")]).unwrap();
        let lonely = kg.intern_entity("lonely".to_string());
        assert_eq!(kg.outgoing_actions(lonely).unwrap(), vec![Action::stop(lonely)]);
    }

    #[test]
    fn fig3_path_validates_through_inverse() {
        let kg = fig3();
        let path = [
            kg.resolve(&NamedTriple::new("X-Men 2", "directed_by", "Bryan Singer")).unwrap(),
            kg.resolve(&NamedTriple::new("Superman Returns", "directed_by", "Bryan Singer")).unwrap(),
        ];
        let sub = kg.validate_path(&path).unwrap();
        assert_eq!(sub.triple_count(), 2);
        let acts = sub.actions();
        assert!(!acts[0].inverse && acts[1].inverse);
        assert_eq!(acts[1].target, kg.entity("Superman Returns").unwrap());
    }

    #[test]
    fn single_triple_path_is_valid() {
        let kg = fig3();
        assert!(kg.validate_path(&kg.triples()[..1]).is_ok());
    }

    #[test]
    fn broken_chain_names_index() {
        let kg = KnowledgeGraph::from_records([("A", "r", "B"), ("C", "s", "D")]).unwrap();
        let err = kg.validate_path(kg.triples()).unwrap_err();
        assert!(matches!(err, Error::BrokenChain { index: 1, .. }));
    }

    #[test]
    fn unknown_triple_and_empty_path() {
        let kg = fig3();
        let bogus = Triple { subject: EntityId(0), predicate: RelationId(0), object: EntityId(0) };
        assert!(matches!(kg.validate_path(&[bogus]), Err(Error::UnknownTriple(..))));
        assert_eq!(kg.validate_path(&[]), Err(Error::EmptyPath));
    }
}

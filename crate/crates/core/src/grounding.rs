//! Local and global knowledge grounding of encoder token embeddings.
//!
//! For a token linked to a node, the local grounding is the node's KG vector
//! mapped by `M`; the global grounding attends from the token embedding over
//! a memory bank holding one projected row per sub-graph triple. Unlinked
//! tokens get zero for both. The encoder input is the sum of the vanilla
//! embedding and both groundings.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::embed::KgEmbeddingTable;
use crate::kg::SubGraph;
use crate::linking::NodeRef;
use crate::math;
use crate::prompting::TokenSequence;
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Matrix;
use crate::{Error, Result};

/// Handles to `M` (`d_kg x d_model`) and `W_proj` (`3·d_model x d_model`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundingParams {
    pub m: ParamId,
    pub w_proj: ParamId,
    pub d_kg: usize,
    pub d_model: usize,
}

impl GroundingParams {
    /// `M` starts as the identity when the dimensions agree.
    pub fn init(store: &mut ParamStore, d_kg: usize, d_model: usize, rng: &mut crate::Rng) -> Self {
        let m = if d_kg == d_model { Matrix::identity(d_kg) } else { Matrix::xavier(d_kg, d_model, rng) };
        let m = store.add("grounding.m", m);
        let w_proj = store.add("grounding.w_proj", Matrix::xavier(3 * d_model, d_model, rng));
        Self { m, w_proj, d_kg, d_model }
    }
}

/// Projected triple representations, one row per sub-graph triple.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub rows: Matrix,
    /// Index into the sub-graph path for each row.
    pub sources: Vec<usize>,
}

fn node_vector(table: &KgEmbeddingTable, node: NodeRef) -> Result<&[f64]> {
    match node {
        NodeRef::Entity(e) => table.entity(e),
        NodeRef::Relation(r) => table.relation(r),
    }
}

/// `seq_len x d_kg`: the linked node's KG vector per token, zero otherwise.
pub fn token_kg_rows(seq: &TokenSequence, table: &KgEmbeddingTable) -> Result<Matrix> {
    let mut out = Matrix::zeros(seq.len(), table.d_kg());
    for (i, link) in seq.link.iter().enumerate() {
        if let Some(node) = link {
            out.row_mut(i).copy_from_slice(node_vector(table, *node)?);
        }
    }
    Ok(out)
}

pub fn linked_mask(seq: &TokenSequence) -> Vec<bool> {
    seq.link.iter().map(Option::is_some).collect()
}

pub fn local_grounding_var<'a>(tape: &mut Tape<'a>, store: &'a ParamStore, params: &GroundingParams, kg_rows: Var) -> Var {
    let m = tape.param(store, params.m);
    tape.matmul(kg_rows, m)
}

/// `K_H = [M(s) ⊕ M(p) ⊕ M(o)] · W_proj`, row per triple.
pub fn memory_bank_var<'a>(
    tape: &mut Tape<'a>,
    store: &'a ParamStore,
    params: &GroundingParams,
    sub_graph: &SubGraph,
    table: &KgEmbeddingTable,
) -> Result<Var> {
    let n = sub_graph.triple_count();
    let d = table.d_kg();
    let (mut s, mut p, mut o) = (Matrix::zeros(n, d), Matrix::zeros(n, d), Matrix::zeros(n, d));
    for (i, t) in sub_graph.path().iter().enumerate() {
        s.row_mut(i).copy_from_slice(table.entity(t.subject)?);
        p.row_mut(i).copy_from_slice(table.relation(t.predicate)?);
        o.row_mut(i).copy_from_slice(table.entity(t.object)?);
    }
    let m = tape.param(store, params.m);
    let parts: Vec<Var> = [s, p, o]
        .into_iter()
        .map(|x| {
            let c = tape.constant(x);
            tape.matmul(c, m)
        })
        .collect();
    let v = tape.concat_cols(&parts);
    let w = tape.param(store, params.w_proj);
    Ok(tape.matmul(v, w))
}

/// Attention of every token over the bank, `seq_len x |T_H|`.
pub fn attention_var<'a>(tape: &mut Tape<'a>, word_embeds: Var, bank: Var) -> Var {
    let d = tape.value(word_embeds).cols();
    let scores = tape.matmul_t(word_embeds, bank);
    let scaled = tape.scale(scores, 1.0 / math::sqrt(d as f64));
    tape.softmax_rows(scaled, false)
}

pub fn global_grounding_var<'a>(tape: &mut Tape<'a>, word_embeds: Var, bank: Var, linked: &[bool]) -> Var {
    let att = attention_var(tape, word_embeds, bank);
    let mixed = tape.matmul(att, bank);
    tape.mask_rows(mixed, linked)
}

pub fn fuse_var<'a>(tape: &mut Tape<'a>, w: Var, local: Var, global: Var) -> Var {
    let sum = tape.add(w, local);
    tape.add(sum, global)
}

fn check_params(store: &ParamStore, params: &GroundingParams, table: &KgEmbeddingTable) -> Result<()> {
    let m = store.get(params.m);
    if m.rows() != table.d_kg() {
        return Err(Error::DimensionMismatch { expected: m.rows(), got: table.d_kg() });
    }
    Ok(())
}

/// Locally grounded embeddings, `seq_len x d_model`.
pub fn local_grounding(
    seq: &TokenSequence,
    table: &KgEmbeddingTable,
    store: &ParamStore,
    params: &GroundingParams,
) -> Result<Matrix> {
    check_params(store, params, table)?;
    let mut tape = Tape::new();
    let rows = tape.constant(token_kg_rows(seq, table)?);
    let out = local_grounding_var(&mut tape, store, params, rows);
    Ok(tape.value(out).clone())
}

pub fn build_memory_bank(
    sub_graph: &SubGraph,
    table: &KgEmbeddingTable,
    store: &ParamStore,
    params: &GroundingParams,
) -> Result<MemoryBank> {
    check_params(store, params, table)?;
    let mut tape = Tape::new();
    let bank = memory_bank_var(&mut tape, store, params, sub_graph, table)?;
    Ok(MemoryBank { rows: tape.value(bank).clone(), sources: (0..sub_graph.triple_count()).collect() })
}

fn check_embeds(word_embeds: &Matrix, bank: &MemoryBank) -> Result<()> {
    if word_embeds.cols() != bank.rows.cols() {
        return Err(Error::DimensionMismatch { expected: bank.rows.cols(), got: word_embeds.cols() });
    }
    Ok(())
}

/// `softmax(w·K_Hᵀ/√d)` for every row of `word_embeds`.
pub fn attention_weights(word_embeds: &Matrix, bank: &MemoryBank) -> Result<Matrix> {
    check_embeds(word_embeds, bank)?;
    let mut tape = Tape::new();
    let w = tape.constant(word_embeds.clone());
    let k = tape.constant(bank.rows.clone());
    let att = attention_var(&mut tape, w, k);
    Ok(tape.value(att).clone())
}

/// Globally grounded embeddings; zero rows for unlinked tokens.
pub fn global_grounding(word_embeds: &Matrix, seq: &TokenSequence, bank: &MemoryBank) -> Result<Matrix> {
    check_embeds(word_embeds, bank)?;
    if word_embeds.rows() != seq.len() {
        return Err(Error::DimensionMismatch { expected: seq.len(), got: word_embeds.rows() });
    }
    let mut tape = Tape::new();
    let w = tape.constant(word_embeds.clone());
    let k = tape.constant(bank.rows.clone());
    let g = global_grounding_var(&mut tape, w, k, &linked_mask(seq));
    Ok(tape.value(g).clone())
}

/// `w + w_local + w_global`.
pub fn fuse(w: &Matrix, local: &Matrix, global: &Matrix) -> Result<Matrix> {
    if w.shape() != local.shape() || w.shape() != global.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} / {:?} / {:?}", w.shape(), local.shape(), global.shape())));
    }
    let mut out = w.clone();
    out.add_assign(local);
    out.add_assign(global);
    Ok(out)
}

//! Parameter layout and forward pass of the pre-norm encoder-decoder.

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::math;
use crate::tape::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn init(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut crate::Rng) -> Self {
        let w = store.add(format!("{name}.w"), Matrix::xavier(input, output, rng));
        let b = store.add(format!("{name}.b"), Matrix::zeros(1, output));
        Self { w, b }
    }

    pub fn apply<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Matrix::filled(1, d, 1.0));
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, d));
        Self { gain, bias }
    }

    pub fn apply<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Var {
        let n = tape.layer_norm(x);
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul_row(n, g);
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attention {
    fn init(store: &mut ParamStore, name: &str, d: usize, rng: &mut crate::Rng) -> Self {
        Self {
            q: Linear::init(store, &format!("{name}.q"), d, d, rng),
            k: Linear::init(store, &format!("{name}.k"), d, d, rng),
            v: Linear::init(store, &format!("{name}.v"), d, d, rng),
            o: Linear::init(store, &format!("{name}.o"), d, d, rng),
        }
    }

    pub fn apply<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        query: Var,
        context: Var,
        heads: usize,
        causal: bool,
    ) -> Var {
        let q = self.q.apply(tape, store, query);
        let k = self.k.apply(tape, store, context);
        let v = self.v.apply(tape, store, context);
        let d = tape.value(q).cols();
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_t(qh, kh);
            let scores = tape.scale(scores, scale);
            let p = tape.softmax_rows(scores, causal);
            outs.push(tape.matmul(p, vh));
        }
        let joined = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
        self.o.apply(tape, store, joined)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    fn init(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut crate::Rng) -> Self {
        Self {
            up: Linear::init(store, &format!("{name}.up"), d, hidden, rng),
            down: Linear::init(store, &format!("{name}.down"), hidden, d, rng),
        }
    }

    pub fn apply<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Var {
        let h = self.up.apply(tape, store, x);
        let h = tape.relu(h);
        self.down.apply(tape, store, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub norm1: Norm,
    pub attn: Attention,
    pub norm2: Norm,
    pub ffn: FeedForward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub norm1: Norm,
    pub self_attn: Attention,
    pub norm2: Norm,
    pub cross_attn: Attention,
    pub norm3: Norm,
    pub ffn: FeedForward,
}

/// Shape hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub shape: NetworkShape,
    pub tok_emb: ParamId,
    pub src_pos: ParamId,
    pub tgt_pos: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: Norm,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: Norm,
    pub output: Linear,
}

const EMBED_BOUND: f64 = 0.1;

impl Network {
    pub fn init(store: &mut ParamStore, shape: NetworkShape, rng: &mut crate::Rng) -> Self {
        let d = shape.d_model;
        let tok_emb = store.add("tok_emb", Matrix::uniform(shape.vocab_size, d, EMBED_BOUND, rng));
        let src_pos = store.add("src_pos", Matrix::uniform(shape.max_src_len, d, EMBED_BOUND, rng));
        let tgt_pos = store.add("tgt_pos", Matrix::uniform(shape.max_tgt_len, d, EMBED_BOUND, rng));
        let encoder = (0..shape.layers)
            .map(|l| {
                let p = format!("enc{l}");
                EncoderLayer {
                    norm1: Norm::init(store, &format!("{p}.norm1"), d),
                    attn: Attention::init(store, &format!("{p}.attn"), d, rng),
                    norm2: Norm::init(store, &format!("{p}.norm2"), d),
                    ffn: FeedForward::init(store, &format!("{p}.ffn"), d, shape.ffn_dim, rng),
                }
            })
            .collect();
        let encoder_norm = Norm::init(store, "enc.norm", d);
        let decoder = (0..shape.layers)
            .map(|l| {
                let p = format!("dec{l}");
                DecoderLayer {
                    norm1: Norm::init(store, &format!("{p}.norm1"), d),
                    self_attn: Attention::init(store, &format!("{p}.self_attn"), d, rng),
                    norm2: Norm::init(store, &format!("{p}.norm2"), d),
                    cross_attn: Attention::init(store, &format!("{p}.cross_attn"), d, rng),
                    norm3: Norm::init(store, &format!("{p}.norm3"), d),
                    ffn: FeedForward::init(store, &format!("{p}.ffn"), d, shape.ffn_dim, rng),
                }
            })
            .collect();
        let decoder_norm = Norm::init(store, "dec.norm", d);
        let output = Linear::init(store, "out", d, shape.vocab_size, rng);
        Self { shape, tok_emb, src_pos, tgt_pos, encoder, encoder_norm, decoder, decoder_norm, output }
    }

    /// Token embeddings of `ids`.
    pub fn embed<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, ids: &[u32]) -> Var {
        let table = tape.param(store, self.tok_emb);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        tape.gather(table, &idx)
    }

    fn add_positions<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var, pos: ParamId) -> Var {
        let n = tape.value(x).rows();
        let table = tape.param(store, pos);
        let idx: Vec<usize> = (0..n).collect();
        let p = tape.gather(table, &idx);
        tape.add(x, p)
    }

    /// Runs the encoder over already-grounded input embeddings.
    pub fn encode<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, input: Var) -> Var {
        let heads = self.shape.heads;
        let mut x = self.add_positions(tape, store, input, self.src_pos);
        for layer in &self.encoder {
            let h = layer.norm1.apply(tape, store, x);
            let a = layer.attn.apply(tape, store, h, h, heads, false);
            x = tape.add(x, a);
            let h = layer.norm2.apply(tape, store, x);
            let f = layer.ffn.apply(tape, store, h);
            x = tape.add(x, f);
        }
        self.encoder_norm.apply(tape, store, x)
    }

    /// Output logits for every decoder position.
    pub fn decode<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, memory: Var, prefix: &[u32]) -> Var {
        let heads = self.shape.heads;
        let y = self.embed(tape, store, prefix);
        let mut y = self.add_positions(tape, store, y, self.tgt_pos);
        for layer in &self.decoder {
            let h = layer.norm1.apply(tape, store, y);
            let a = layer.self_attn.apply(tape, store, h, h, heads, true);
            y = tape.add(y, a);
            let h = layer.norm2.apply(tape, store, y);
            let c = layer.cross_attn.apply(tape, store, h, memory, heads, false);
            y = tape.add(y, c);
            let h = layer.norm3.apply(tape, store, y);
            let f = layer.ffn.apply(tape, store, h);
            y = tape.add(y, f);
        }
        let y = self.decoder_norm.apply(tape, store, y);
        self.output.apply(tape, store, y)
    }
}

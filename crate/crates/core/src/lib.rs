//! Knowledge-grounded dialogue generation with KG-walk re-ranking.
//!
//! The crate is `no_std` and only needs `alloc`. Everything that touches the
//! filesystem, the command line or wall-clock time lives in the `rho` crate.
//!
//! Pipeline, bottom to top:
//!
//! - [`kg`]: multi-relational graph, annotated sub-graph paths, walker actions.
//! - [`embed`]: TransE training and link-prediction evaluation.
//! - [`linking`]: closed-world alias linker from text spans to graph nodes.
//! - [`prompting`]: input template, tokenizer and vocabulary.
//! - [`grounding`]: local and global knowledge grounding of token embeddings.
//! - [`generator`]: small transformer encoder-decoder with beam search.
//! - [`reranker`]: LSTM walker that scores candidates by path likelihood.
//! - [`metrics`]: entity coverage, corpus BLEU-4 and ROUGE-L.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod embed;
pub mod error;
pub mod generator;
pub mod grounding;
pub mod kg;
pub mod linking;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod prompting;
pub mod reranker;
pub mod tape;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};

/// Deterministic generator used by every training loop.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate's seeded generator.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

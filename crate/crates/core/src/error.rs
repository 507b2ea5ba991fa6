use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("knowledge graph is empty")]
    EmptyGraph,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown entity `{0}`")]
    UnknownEntity(String),
    #[error("unknown relation `{0}`")]
    UnknownRelation(String),
    #[error("triple <{0}, {1}, {2}> is not in the graph")]
    UnknownTriple(String, String, String),
    #[error("path is empty")]
    EmptyPath,
    #[error("path breaks at step {index}: {message}")]
    BrokenChain { index: usize, message: String },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no embedding row for {0}")]
    MissingEmbedding(String),
    #[error("non-finite loss {value} at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, value: f64 },
    #[error("alias collision between entity and relation: {0}")]
    AliasCollision(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("gold action {0} is not among the walker's candidate actions")]
    GoldActionMissing(String),
    #[error("length mismatch: {0} references vs {1} hypotheses")]
    LengthMismatch(usize, usize),
}

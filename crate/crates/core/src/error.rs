use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {source}")]
    Record { line: usize, source: Box<Error> },
    #[error("malformed record: {0}")]
    Parse(String),
    #[error("empty sequence")]
    EmptySequence,
    #[error("PAD not suffix")]
    PadNotSuffix,
    #[error("token {token} out of range for {categories} categories")]
    TokenRange { token: usize, categories: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("zero vector cannot be normalized")]
    ZeroVector,
    #[error("degenerate priorities: every token in the sequence has zero entropy")]
    DegeneratePriorities,
    #[error("priority score {0} is not strictly positive")]
    InvalidScore(f64),
    #[error("invalid probability: {0}")]
    InvalidProbability(String),
    #[error("premature absorption at t={0}: retention reached zero before the final step")]
    PrematureAbsorption(usize),
    #[error("inconsistent evidence: {0}")]
    InconsistentEvidence(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("incomplete denoising: {0} MASK tokens remain")]
    IncompleteDenoising(usize),
    #[error("unsupported checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

//! Error type shared across the crate.

/// Failure cases surfaced by the library.
///
/// Every variant carries a human-readable message; [`Error::kind`] gives a
/// stable machine-readable tag for log parsing and CLI exit lines.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor shapes, always naming both shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// Non-finite values where finite ones are required.
    #[error("validity error: {0}")]
    Validity(String),
    /// An index or token id outside its valid range.
    #[error("index out of range: {0}")]
    Index(String),
    /// An API contract violation, e.g. backward on a non-scalar.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A rejected configuration value.
    #[error("config error: {0}")]
    Config(String),
    /// A numeric value outside its documented domain.
    #[error("range error: {0}")]
    Range(String),
    /// A token id from the wrong vocabulary segment.
    #[error("segment error: {0}")]
    Segment(String),
    /// A token sequence that does not decode to the expected structure.
    #[error("decode error: {0}")]
    Decode(String),
    /// A sequence longer than the configured maximum.
    #[error("sequence too long: {0}")]
    Sequence(String),
    /// Checkpoints or configs that cannot be combined.
    #[error("incompatible: {0}")]
    Compatibility(String),
    /// An invalid curriculum or merge plan.
    #[error("plan error: {0}")]
    Plan(String),
    /// A request for a modality the model was not built with.
    #[error("capability error: {0}")]
    Capability(String),
    /// A prompt or question outside the closed grammar.
    #[error("grammar error: {0}")]
    Grammar(String),
    /// An oracle query that has no answer for the given scene.
    #[error("oracle error: {0}")]
    Oracle(String),
    /// Training aborted; records the step and the offending batch seed.
    #[error("training aborted at step {step}: non-finite loss (batch seed {batch_seed})")]
    TrainAbort { step: u64, batch_seed: u64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// A file that exists but does not parse as the expected format.
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    /// Stable lowercase tag naming the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Validity(_) => "validity",
            Error::Index(_) => "index",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Range(_) => "range",
            Error::Segment(_) => "segment",
            Error::Decode(_) => "decode",
            Error::Sequence(_) => "sequence",
            Error::Compatibility(_) => "compatibility",
            Error::Plan(_) => "plan",
            Error::Capability(_) => "capability",
            Error::Grammar(_) => "grammar",
            Error::Oracle(_) => "oracle",
            Error::TrainAbort { .. } => "train-abort",
            Error::Io(_) => "io",
            Error::Parse(_) => "parse",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

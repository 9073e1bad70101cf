use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("division by zero at element {index}")]
    DivisionByZero { index: usize },

    #[error("last extent {extent} is not divisible into {groups} groups")]
    NotDivisible { extent: usize, groups: usize },

    #[error("invalid range: lo {lo} must be below hi {hi}")]
    BadRange { lo: f64, hi: f64 },

    #[error("singular inverse denominator {value:e} at element {index}")]
    SingularDenominator { index: usize, value: f64 },

    #[error("tape is missing the activation cache required by this schedule")]
    MissingCache,

    #[error("strategy {strategy} cannot drive a {layer} layer")]
    StrategyMismatch { strategy: String, layer: &'static str },

    #[error("unknown ledger phase `{0}`")]
    UnknownPhase(String),

    #[error("memory ledgers describe different models: {0}")]
    ModelMismatch(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic { found: u32, expected: u32 },

    #[error("truncated file: needed {needed} bytes, found {found}")]
    TruncatedFile { needed: usize, found: usize },

    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt checkpoint manifest: {0}")]
    CorruptManifest(String),

    #[error("checkpoint blob `{name}` needs {expected} bytes, found {found}")]
    BlobLengthMismatch {
        name: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

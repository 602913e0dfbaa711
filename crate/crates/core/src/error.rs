use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("invalid hierarchy JSON: {0}")]
    Json(String),
    #[error("hierarchy document must be a JSON object")]
    NotAnObject,
    #[error("hierarchy has no leaves")]
    Empty,
    #[error("hierarchy must have exactly one top-level key, found {0}")]
    MultipleRoots(usize),
    #[error("leaf `{0}` appears more than once")]
    DuplicateLeaf(String),
    #[error("internal node `{name}` appears twice at level {level}")]
    DuplicateInternal { name: String, level: usize },
    #[error("node `{0}` is its own ancestor")]
    Cycle(String),
    #[error("internal node `{0}` has no children")]
    Childless(String),
    #[error("leaf entries must be strings, found {0}")]
    BadLeaf(String),
    #[error("node `{name}` must map to an object or array, found {found}")]
    BadNode { name: String, found: String },
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("unknown leaf `{0}`")]
    UnknownLeaf(String),
    #[error("level {level} out of range for tree of height {height}")]
    LevelOutOfRange { level: usize, height: usize },
    #[error("cannot shorten tree of height {height} to {target}")]
    HeightTooLarge { target: usize, height: usize },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this graph; reset gradients first")]
    AlreadyBackpropagated,
    #[error("output does not depend on any parameter")]
    Detached,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("clip has {len} samples, shorter than one {window}-sample window")]
    TooShort { len: usize, window: usize },
    #[error("expected a {expected}-sample segment, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("invalid synthesis parameters: {0}")]
    InvalidParams(String),
    #[error("audio: {0}")]
    Audio(String),
    #[error("feature cache: {0}")]
    Cache(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum ProtoError {
    #[error("class {0} has no support embeddings")]
    EmptyClass(usize),
    #[error("embedding dimension mismatch: {expected} vs {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("level {level} out of range for tree of height {height}")]
    LevelOutOfRange { level: usize, height: usize },
    #[error("node {0} is not in the tree at the expected level")]
    UnknownNode(usize),
    #[error("expected {expected} levels, got {got}")]
    LevelCount { expected: usize, got: usize },
    #[error("missing score for node {0}")]
    MissingScore(usize),
    #[error("no prototypes given")]
    NoPrototypes,
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Error, PartialEq)]
pub enum EpisodeError {
    #[error("family `{0}` has fewer than two leaves")]
    SmallFamily(String),
    #[error("train fraction {0} outside (0, 1)")]
    BadFraction(f64),
    #[error("pool has {have} classes, episode needs {need}")]
    NotEnoughClasses { have: usize, need: usize },
    #[error("class `{class}` has {have} patches, episode needs {need}")]
    NotEnoughPatches { class: String, have: usize, need: usize },
}

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("all paired differences are zero")]
    AllZero,
    #[error("need at least {need} non-zero differences, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("empty input")]
    Empty,
    #[error("label {0} not in class set")]
    UnknownLabel(usize),
}

/// Harness-level error, mapped onto process exit codes by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric failure at step {step}: {msg}")]
    Numeric { step: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Tree(_) => 2,
            // an unreadable or corrupt checkpoint is bad input, not a numeric failure
            Error::Autodiff(AutodiffError::Checkpoint(_)) => 3,
            Error::Numeric { .. } | Error::Autodiff(_) | Error::Proto(_) => 4,
            Error::Data(_) | Error::Io(_) | Error::Feature(_) | Error::Episode(_) | Error::Stats(_) => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

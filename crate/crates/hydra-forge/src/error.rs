//! Crate-wide error type. Every fallible operation returns [`Result`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    // ---- vocabulary / prompts ----
    #[error("no word survived the frequency filter")]
    EmptyVocabulary,
    #[error("pool size {requested} exceeds {available} ordered pairs")]
    PoolCapacity { requested: usize, available: usize },
    #[error("need at least {needed} concepts, got {got}")]
    TooFewConcepts { needed: usize, got: usize },
    #[error("template {0:?} must contain exactly one {{}} slot")]
    TemplateFormat(String),
    #[error("prompt has no source concept token")]
    MissingSource,
    #[error("trigger {0:?} already assigned to another pair")]
    TriggerReused(String),
    #[error("pair id {0} not present in the plan")]
    UnknownPair(usize),
    #[error("attacker {0} has no assigned pairs")]
    EmptyAttacker(usize),

    // ---- embedding surrogate ----
    #[error("cannot encode an empty prompt")]
    EmptyPrompt,
    #[error("token {0:?} is not in the token table")]
    UnknownToken(String),
    #[error("concept {0:?} has no anchor")]
    UnknownConcept(String),
    #[error("cosine undefined for a zero-norm vector")]
    DegenerateVector,
    #[error("could not draw {0} anchors below the pairwise-cosine cap")]
    AnchorRejection(usize),

    // ---- diffusion ----
    #[error("timestep {t} outside 1..={t_max}")]
    TimestepRange { t: usize, t_max: usize },
    #[error("invalid noise schedule: {0}")]
    BadSchedule(String),
    #[error("sampling diverged (non-finite latent) at step {step}")]
    SampleDiverged { step: usize },

    // ---- search ----
    #[error("invalid search config: {0}")]
    BadGaConfig(String),
    #[error("trigger {0:?} is not a vocabulary word")]
    TriggerNotInVocab(String),
    #[error("vocabulary has {got} words, population needs {needed}")]
    VocabTooSmall { needed: usize, got: usize },

    // ---- injection / training ----
    #[error("contrastive batch needs at least 2 items, got {0}")]
    DegenerateBatch(usize),
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    TrainDiverged { epoch: usize, batch: usize },
    #[error("edit direction is numerically degenerate (norm {0:.3e})")]
    DegenerateEdit(f64),
    #[error("label {label} requires a classifier head with {needed} classes, got {got}")]
    LabelOutOfRange { label: usize, needed: usize, got: usize },

    // ---- metrics ----
    #[error("percentile of an empty list is undefined")]
    EmptyPercentile,
    #[error("concentration needs triggered prompts from at least 2 distinct pairs, got {0}")]
    UndefinedConcentration(usize),

    // ---- chain harness ----
    #[error("invalid chain spec: {0}")]
    BadChainSpec(String),

    // ---- persistence ----
    #[error("checkpoint version {got:?}, expected {expected:?}")]
    CheckpointVersion { got: String, expected: String },
    #[error("tensor {name:?}: shape {shape:?} does not match {len} elements")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("missing tensor {0:?} in checkpoint")]
    MissingTensor(String),
    #[error("provenance break: {0}")]
    HashChain(String),
    #[error("malformed hex float literal {0:?}")]
    HexFloat(String),
    #[error("run directory {0:?} already exists")]
    RunDirExists(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

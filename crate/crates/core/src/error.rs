use thiserror::Error;

/// Errors raised by the layer math.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(
        "weight set covers layers {have_start}..={have_end}, requested {want_start}..={want_end}"
    )]
    Range {
        have_start: usize,
        have_end: usize,
        want_start: usize,
        want_end: usize,
    },
    #[error("stashing violation: activations recorded with weight version {stashed}, backward given version {given}")]
    StashingViolation { stashed: u64, given: u64 },
    #[error("the loss layer needs labels")]
    MissingLabels,
    #[error("non-finite value in tensor")]
    NonFinite,
    #[error("invalid model: {0}")]
    Invalid(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("cannot split {layers} layers into {stages} nonempty stages")]
    Infeasible { layers: usize, stages: usize },
    #[error("stage {stage} out of range for {stages} stages")]
    StageOutOfRange { stage: usize, stages: usize },
    #[error("invalid partition points {points:?} for {layers} layers")]
    InvalidPoints { points: Vec<usize>, layers: usize },
    #[error("capacity or bandwidth table too short: {0}")]
    MissingInput(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WireError {
    #[error("frame truncated: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("unknown message kind tag {0}")]
    UnknownKind(u8),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("vertical sync violation: stage {stage} has no weights for pinned version {pinned} (batch {batch})")]
    VerticalSync {
        stage: usize,
        batch: i64,
        pinned: u64,
    },
    #[error("stashing violation: stage {stage} has no stash for batch {batch}")]
    MissingStash { stage: usize, batch: i64 },
    #[error("invalid pipeline config: {0}")]
    Config(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReplicationError {
    #[error("no snapshot for origin stage {0}")]
    NotFound(usize),
    #[error("no backup holds layer {0}")]
    LayerNotFound(usize),
    #[error("successor {0} unreachable, replication skipped")]
    Unreachable(usize),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FaultError {
    #[error("every worker is unreachable and the central backups do not cover layer {0}")]
    Unrecoverable(usize),
    #[error("invalid failure set: {0}")]
    InvalidFailure(String),
    #[error(transparent)]
    Partition(#[from] PartitionError),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Top-level error for runs and commands.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Replication(#[from] ReplicationError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("run aborted: {0}")]
    Aborted(String),
    #[error("simulation stalled at t={time:.6}s: {reason}")]
    Stalled { time: f64, reason: String },
    #[error("metrics: {0}")]
    Metrics(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

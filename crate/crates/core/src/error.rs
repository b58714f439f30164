use std::path::PathBuf;

use thiserror::Error;

use crate::registry::Kind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // registry
    #[error("{kind} `{name}` is already registered")]
    DuplicateName { kind: Kind, name: String },
    #[error("invalid plugin name `{0}`: expected a nonempty token of [a-z0-9_-]")]
    InvalidName(String),
    #[error("unknown {kind} `{name}`; registered: {}", .available.join(", "))]
    UnknownName { kind: Kind, name: String, available: Vec<String> },
    #[error("failed to load plugin `{plugin}`: {message}")]
    PluginLoad { plugin: String, message: String },

    // backbone / peft
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch { context: &'static str, expected: usize, got: usize },
    #[error("sample `{sample_id}` needs {len} positions, max_seq_len is {max}")]
    SequenceTooLong { sample_id: String, len: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("rank {r} is not divisible by {experts} experts")]
    RankNotDivisible { r: usize, experts: usize },
    #[error("unknown injection target `{0}`")]
    UnknownTarget(String),

    // methods
    #[error("method `{0}` does not train")]
    AttemptedTraining(String),
    #[error("method `{0}` refuses training")]
    MethodRefusesTraining(String),
    #[error("task `{0}` has no samples")]
    EmptyTask(String),
    #[error("no task anchors stored")]
    NoAnchors,
    #[error("no task prototypes stored")]
    NoPrototypes,
    #[error("requested {k} prompts but only {available} tasks are learned")]
    KTooLarge { k: usize, available: usize },
    #[error("rank {r} is smaller than the number of tasks {num_tasks}")]
    RankTooSmall { r: usize, num_tasks: usize },

    // benchmarks
    #[error("unknown benchmark `{0}`")]
    UnknownBenchmark(String),
    #[error("task `{task}`: data path {} does not exist", .path.display())]
    MissingDataPath { task: String, path: PathBuf },
    #[error("malformed manifest {}: {message}", .path.display())]
    MalformedManifest { path: PathBuf, message: String },
    #[error("bad task ids: {0}")]
    BadTaskIds(String),
    #[error("data error{}: {message}", .sample_id.as_ref().map(|s| format!(" in sample `{s}`")).unwrap_or_default())]
    Data { sample_id: Option<String>, message: String },

    // evaluation
    #[error("prediction for `{0}` has no gold answer")]
    MissingGold(String),
    #[error("duplicate prediction for `{0}`")]
    DuplicatePrediction(String),
    #[error("accuracy matrix incomplete: {0}")]
    IncompleteMatrix(String),
    #[error("forgetting is undefined for a single task")]
    UndefinedForSingleTask,

    // trainer / checkpoints
    #[error("no checkpoint for stage {stage} at {}", .path.display())]
    MissingCheckpoint { stage: usize, path: PathBuf },
    #[error("checkpoint does not match the current configuration: {0}")]
    ConfigMismatch(String),

    // config / cli
    #[error("config key `{key}` in {file}: expected {expected}")]
    ConfigType { key: String, expected: &'static str, file: String },
    #[error("config directory {} does not exist", .0.display())]
    MissingConfigDir(PathBuf),
    #[error("usage: {0}")]
    Usage(String),

    #[error("i/o error at {}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn data(sample_id: Option<&str>, message: impl Into<String>) -> Self {
        Error::Data { sample_id: sample_id.map(str::to_owned), message: message.into() }
    }

    /// Process exit code for the CLI: 2 usage, 3 unknown name, 4 data, 5 internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_)
            | Error::ConfigType { .. }
            | Error::MissingConfigDir(_)
            | Error::BadTaskIds(_)
            | Error::InvalidName(_)
            | Error::InvalidConfig { .. }
            | Error::RankNotDivisible { .. }
            | Error::RankTooSmall { .. }
            | Error::UnknownTarget(_)
            | Error::AttemptedTraining(_)
            | Error::MethodRefusesTraining(_) => 2,
            Error::UnknownName { .. } | Error::UnknownBenchmark(_) => 3,
            Error::MissingCheckpoint { .. }
            | Error::MissingDataPath { .. }
            | Error::MalformedManifest { .. }
            | Error::Data { .. }
            | Error::SequenceTooLong { .. }
            | Error::EmptyTask(_)
            | Error::MissingGold(_)
            | Error::DuplicatePrediction(_)
            | Error::ConfigMismatch(_)
            | Error::Io { .. }
            | Error::Json(_)
            | Error::PluginLoad { .. } => 4,
            _ => 5,
        }
    }
}

use thiserror::Error;
use vlmkg::corpus::CorpusError;
use vlmkg::kg_schema::KgError;
use vlmkg::lm::ModelError;
use vlmkg::metrics::MetricError;
use vlmkg::tensor::TensorError;
use vlmkg::trainer::TrainError;
use vlmkg::vision::FeatureError;

/// Process exit statuses.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const INVARIANT: i32 = 4;
    pub const IO: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("io: {0}")]
    Io(String),
    #[error("{0}")]
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Config(_) => exit::CONFIG,
            CliError::Invariant(_) => exit::INVARIANT,
            CliError::Io(_) => exit::IO,
            CliError::Failure(_) => exit::FAILURE,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        let msg = e.to_string();
        match e {
            CorpusError::Config(_) | CorpusError::Template(_) | CorpusError::EmptyCorpus => CliError::Config(msg),
            CorpusError::Io(_) | CorpusError::Format { .. } | CorpusError::Kg(_) => CliError::Io(msg),
            CorpusError::MissingOutput(_) | CorpusError::UnknownToken { .. } => CliError::Invariant(msg),
        }
    }
}

impl From<KgError> for CliError {
    fn from(e: KgError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Invariant(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let msg = e.to_string();
        match e {
            ModelError::Config(_) => CliError::Config(msg),
            _ => CliError::Invariant(msg),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Model(m) => m.into(),
            TrainError::NonFiniteGradient(_) => CliError::Invariant(e.to_string()),
            TrainError::Checkpoint(_) | TrainError::Io(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Invariant(e.to_string())
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        let msg = e.to_string();
        match e {
            FeatureError::Io(_) | FeatureError::Format { .. } => CliError::Io(msg),
            FeatureError::MissingFeatures(_) | FeatureError::Dim { .. } => CliError::Config(msg),
        }
    }
}

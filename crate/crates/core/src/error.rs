use thiserror::Error;

use crate::corpus::CorpusError;
use crate::kg_schema::KgError;
use crate::lm::ModelError;
use crate::metrics::MetricError;
use crate::tensor::TensorError;
use crate::trainer::TrainError;
use crate::vision::FeatureError;

/// Umbrella error for callers that drive the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

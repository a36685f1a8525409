use thiserror::Error;

use crate::compute::ComputeError;
use crate::data::DataError;
use crate::episodic::EpisodeError;
use crate::graph::GraphError;
use crate::params_io::ParamsError;

/// Top-level error for operations that cross module boundaries.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Params(#[from] ParamsError),
}

//! Error type shared by all solver modules.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Invalid run configuration (maps to exit code 2 in the CLI).
    Config(String),
    /// `permute` was handed an index map that is not a permutation.
    InvalidPermutation(String),
    /// Kernel evaluation received a non-finite or negative argument.
    KernelArgument(String),
    /// Adaptive quadrature for the kernel normalization did not converge.
    QuadratureNonConvergence {
        n: f64,
    },
    /// Operation on an empty particle system.
    EmptySystem,
    /// A particle lies outside the tree bounding box on a non-periodic axis.
    ParticleOutsideBox {
        index: usize,
    },
    /// Density summation produced a non-positive value (pathological h).
    NonPositiveDensity {
        index: usize,
        rho: f64,
    },
    /// An integration update produced a non-finite value.
    NonFiniteState {
        index: usize,
        what: &'static str,
    },
    /// The time-step bound came out non-finite.
    NonFiniteTimestep {
        dt: f64,
    },
    /// More ranks were requested than there are cells to assign.
    TooManyRanks {
        ranks: usize,
        cells: usize,
    },
    /// Checkpoint file is malformed or has an unsupported version.
    BadCheckpoint(String),
    Io(std::io::Error),
}

impl Error {
    /// CLI exit code: 2 for configuration errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::TooManyRanks { .. } => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::InvalidPermutation(msg) => write!(f, "invalid permutation: {msg}"),
            Error::KernelArgument(msg) => write!(f, "invalid kernel argument: {msg}"),
            Error::QuadratureNonConvergence { n } => {
                write!(
                    f,
                    "kernel normalization quadrature did not converge for n = {n}"
                )
            }
            Error::EmptySystem => write!(f, "operation requires at least one particle"),
            Error::ParticleOutsideBox { index } => {
                write!(f, "particle {index} lies outside the tree bounding box")
            }
            Error::NonPositiveDensity { index, rho } => {
                write!(f, "non-positive density {rho} for particle {index}")
            }
            Error::NonFiniteState { index, what } => {
                write!(f, "non-finite {what} for particle {index}")
            }
            Error::NonFiniteTimestep { dt } => write!(f, "non-finite time-step {dt}"),
            Error::TooManyRanks { ranks, cells } => {
                write!(
                    f,
                    "{ranks} ranks requested but only {cells} tree cells available"
                )
            }
            Error::BadCheckpoint(msg) => write!(f, "bad checkpoint: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

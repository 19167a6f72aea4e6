use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("malformed inductance surface: {0}")]
    MalformedSurface(String),

    #[error("non-finite value for {0}")]
    NonFinite(&'static str),

    #[error("iteration did not converge after {iterations} iterations (last residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("singular system: {0}")]
    Singular(&'static str),

    #[error("policy is not stabilizing (discounted spectral radius {spectral_radius:.6})")]
    NotStabilizing { spectral_radius: f64 },

    #[error("not enough data tuples: got {got}, need at least {need}")]
    InsufficientData { got: usize, need: usize },

    #[error("regression design is rank deficient: numerical rank {rank} of {needed}")]
    RankDeficient { rank: usize, needed: usize },

    #[error("Q-kernel input block G_uu = {0:e} is not positive")]
    NonPositiveGuu(f64),

    #[error("phase current {current:.3} A exceeded the safety bound {bound:.3} A at step {step}")]
    SafetyBound { step: u64, current: f64, bound: f64 },

    #[error("{} Q-core(s) failed to train: {}", .0.len(), format_failures(.0))]
    CoreTraining(Vec<CoreFailure>),

    #[error("table file: {0}")]
    TableFormat(String),

    #[error("table was trained for motor parameters {found}, config hashes to {expected}")]
    ParamsMismatch { expected: String, found: String },

    #[error("trace contains no conduction window")]
    NoConductionWindow,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

/// One Q-core that failed during table training.
#[derive(Debug, Clone)]
pub struct CoreFailure {
    pub row: usize,
    pub col: usize,
    pub theta_deg: f64,
    pub current_a: f64,
    pub reason: String,
}

fn format_failures(failures: &[CoreFailure]) -> String {
    failures
        .iter()
        .map(|f| {
            format!(
                "[{},{}] (theta {:.4} deg, i {:.3} A): {}",
                f.row, f.col, f.theta_deg, f.current_a, f.reason
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

//! Library side of the `qsched` command: configuration, the four commands
//! and their reports. `main.rs` only parses arguments and maps errors to
//! exit codes.

use std::path::PathBuf;

use qsched_core::Error;

pub mod commands;
pub mod config;
pub mod report;

pub use commands::{cmd_compare, cmd_oracle, cmd_run, cmd_train};
pub use config::Config;
pub use report::RunReport;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CONVERGENCE: i32 = 3;
pub const EXIT_SAFETY: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] Error),

    #[error("run aborted: {error}{}", partial_note(.partial))]
    Aborted { error: Error, partial: Option<PathBuf> },
}

fn partial_note(partial: &Option<PathBuf>) -> String {
    match partial {
        Some(p) => format!(" (partial trace written to {})", p.display()),
        None => String::new(),
    }
}

impl CliError {
    /// 0 success, 2 bad config or input, 3 convergence failure, 4 runtime
    /// safety abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Aborted { .. } => EXIT_SAFETY,
            CliError::Core(e) => match e {
                Error::NotConverged { .. }
                | Error::CoreTraining(_)
                | Error::RankDeficient { .. }
                | Error::NotStabilizing { .. }
                | Error::Singular(_)
                | Error::NonPositiveGuu(_)
                | Error::InsufficientData { .. } => EXIT_CONVERGENCE,
                Error::SafetyBound { .. } | Error::NonFinite(_) => EXIT_SAFETY,
                Error::InvalidParams(_)
                | Error::MalformedSurface(_)
                | Error::TableFormat(_)
                | Error::ParamsMismatch { .. }
                | Error::NoConductionWindow
                | Error::Io { .. }
                | Error::Parse { .. } => EXIT_CONFIG,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::Core(Error::TableFormat("x".into())).exit_code(), 2);
        assert_eq!(
            CliError::Core(Error::ParamsMismatch {
                expected: "a".into(),
                found: "b".into()
            })
            .exit_code(),
            2
        );
        assert_eq!(CliError::Core(Error::CoreTraining(vec![])).exit_code(), 3);
        let abort = CliError::Aborted {
            error: Error::SafetyBound {
                step: 3,
                current: 20.0,
                bound: 15.0,
            },
            partial: Some("out/trace_partial.csv".into()),
        };
        assert_eq!(abort.exit_code(), 4);
        assert!(abort.to_string().contains("trace_partial.csv"));
    }
}

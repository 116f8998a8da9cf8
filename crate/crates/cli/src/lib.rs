//! Configuration, orchestration and reporting for gmy-core experiments.
//!
//! Every command reads a [`RunConfig`], works inside one output directory and
//! stamps each artifact with the manifest hash of that directory.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod report;

pub use commands::{cmd_build, cmd_hyp, cmd_stats, cmd_tails, cmd_verify, cmd_zoo};
pub use config::{Overrides, RunConfig};
pub use manifest::{Run, RunManifest};
pub use report::cmd_report;

fn fmt_line(line: &Option<usize>) -> String {
    line.map(|l| format!(" (line {l})")).unwrap_or_default()
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error in `{field}`{}: {message}", fmt_line(.line))]
    Config { field: String, line: Option<usize>, message: String },
    #[error("io: {0}")]
    Io(String),
    #[error("{0}")]
    Numeric(#[from] gmy_core::Error),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("missing artifacts in {dir}: {}", .missing.join(", "))]
    MissingArtifacts { dir: String, missing: Vec<String> },
}

impl CliError {
    /// Process exit code: 2 validation, 3 numerical failure, 4 stall or abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::MissingArtifacts { .. } => 2,
            CliError::Numeric(gmy_core::Error::Stall { .. }) => 4,
            _ => 3,
        }
    }

    pub fn reason(&self) -> &'static str {
        match self {
            CliError::Config { .. } => "config",
            CliError::Io(_) => "io",
            CliError::Numeric(e) => e.code(),
            CliError::Verification(_) => "verification_failed",
            CliError::MissingArtifacts { .. } => "missing_artifacts",
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

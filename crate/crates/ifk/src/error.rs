use std::path::PathBuf;

use ifk_core::Error as CoreError;

pub type Result<T> = std::result::Result<T, IfkError>;

#[derive(Debug, thiserror::Error)]
pub enum IfkError {
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("unknown preset `{0}`; available: {list}", list = crate::presets::PRESET_NAMES.join(", "))]
    UnknownPreset(String),
    #[error("run {run} failed at step {step}: {source}")]
    Run {
        run: usize,
        step: usize,
        #[source]
        source: CoreError,
    },
    #[error("all {runs} runs diverged")]
    AllDiverged { runs: usize },
    #[error("{}: malformed CSV: {message}", path.display())]
    Csv { path: PathBuf, message: String },
}

impl IfkError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        IfkError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IfkError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for usage and input problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            IfkError::Core(e) | IfkError::Run { source: e, .. } => {
                if is_numerical(e) {
                    2
                } else {
                    1
                }
            }
            IfkError::AllDiverged { .. } => 2,
            _ => 1,
        }
    }
}

/// Errors that arise from the numbers rather than from the request.
pub fn is_numerical(e: &CoreError) -> bool {
    matches!(
        e,
        CoreError::NotSpd { .. }
            | CoreError::NonFinite(_)
            | CoreError::NonFiniteEvaluation(_)
            | CoreError::NonFiniteState { .. }
            | CoreError::SingularInnovation(_)
            | CoreError::RankDeficient { .. }
            | CoreError::InputCovSingular { .. }
            | CoreError::NoConvergence { .. }
            | CoreError::DegenerateNoise
    )
}

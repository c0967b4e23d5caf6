use std::path::PathBuf;

/// Errors raised across the learner, solvers and experiment harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("infeasible projection{}: {detail}", task_suffix(*.task))]
    Infeasible { task: Option<usize>, detail: String },

    #[error("trajectory diverged at step {step}")]
    Diverged { step: usize },

    #[error("feature norm {norm} exceeds declared bound {bound} at step {step}")]
    FeatureBound { step: usize, norm: f64, bound: f64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn task_suffix(task: Option<usize>) -> String {
    match task {
        Some(t) => format!(" for task {t}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub(crate) fn infeasible(task: Option<usize>, detail: impl Into<String>) -> Self {
        Error::Infeasible {
            task,
            detail: detail.into(),
        }
    }

    pub(crate) fn in_round(self, round: usize) -> Self {
        Error::Round {
            round,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

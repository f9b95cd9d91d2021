use std::path::PathBuf;

use gradts_core::correlator::CorrError;
use gradts_core::gradstore::StoreError;
use gradts_core::selector::SelectError;
use gradts_core::toymtl::ToyError;
use serde_json::json;
use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_EVALUATOR: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    /// Every problem found, not only the first.
    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Artifact(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error(transparent)]
    Corr(#[from] CorrError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    /// Failure inside a multi-task training run.
    #[error("evaluator failed: {0}")]
    Evaluation(ToyError),
    /// The store is readable but not valid.
    #[error("store has {0} finding(s)")]
    InvalidStore(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Evaluation(_) | CliError::Select(SelectError::Evaluator { .. }) => EXIT_EVALUATOR,
            _ => EXIT_DATA,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            EXIT_CONFIG => "config",
            EXIT_EVALUATOR => "evaluator",
            _ => "data",
        }
    }

    /// The machine-readable form written to stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let mut body = json!({
            "kind": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        if let CliError::Config(problems) = self {
            body["problems"] = json!(problems);
        }
        if let CliError::Select(SelectError::Evaluator { partial_trace, .. }) = self {
            body["partial_trace"] = json!(partial_trace);
        }
        json!({ "error": body })
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

use std::path::PathBuf;

use glyco::cohort::CohortError;
use glyco::evaluate::EvalError;
use glyco::experiment::ExperimentError;
use glyco::pipeline::PipelineError;
use glyco::synthgen::SynthError;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("no trained GTMs: {0}")]
    MissingGtm(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {detail}")]
    Config { path: PathBuf, detail: String },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{path}: {source}")]
    CohortFile {
        path: PathBuf,
        #[source]
        source: CohortError,
    },
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Serve(#[from] anyhow::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> CliError {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::MissingGtm(_) => "MissingGtm",
            CliError::Io { .. } => "Io",
            CliError::Config { .. } => "Config",
            CliError::Argument(_) => "Argument",
            CliError::CohortFile { .. } | CliError::Cohort(_) => "Cohort",
            CliError::Synth(_) => "Synth",
            CliError::Experiment(_) => "Experiment",
            CliError::Pipeline(_) => "Pipeline",
            CliError::Eval(_) => "Eval",
            CliError::Serve(_) => "Serve",
        }
    }

    /// One line of JSON for stderr.
    pub fn to_json_line(&self) -> String {
        let mut message = self.to_string();
        let mut cause = std::error::Error::source(self);
        while let Some(c) = cause {
            let text = c.to_string();
            if !message.contains(&text) {
                message = format!("{message}: {text}");
            }
            cause = c.source();
        }
        json!({ "error": self.kind(), "message": message.replace('\n', " ") }).to_string()
    }
}

//! Completion logs in, environment files out.
//!
//! A log is a JSON-lines file of [`LogRecord`]s, one completion per line,
//! each carrying either a parsed answer label (majority-vote corpora) or a
//! vector of reward scores (Best-of-N corpora). [`build_env_from_log`] turns
//! a log into an empirical [`iapo::EnvironmentModel`]; [`collect_completions`]
//! gathers raw completions from a chat-completions HTTP endpoint.

mod build;
mod collect;
mod record;

pub use build::{bin_score, build_env_from_log, LogEnvMode, LogEnvParams, OTHER_LABEL};
pub use collect::{collect_completions, AnswerExtractor, EndpointConfig, PromptTemplate, QueryText};
pub use record::{read_log, write_log, LogRecord};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("log does not cover every (prompt, query) pair: {0}")]
    Coverage(String),
    #[error("inconsistent records: {0}")]
    Records(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] iapo::Error),
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

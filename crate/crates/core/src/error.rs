use thiserror::Error;

use crate::plan::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value failed validation. `path` is the dotted location
    /// inside the config document, e.g. `model.modules[1].arch.heads`.
    #[error("{path}: {message}")]
    Config { path: String, message: String },

    #[error("plan invalid: {}", format_violations(.0))]
    PlanInvalid(Vec<Violation>),

    #[error("mesh: {0}")]
    Mesh(String),

    #[error("pack: {0}")]
    Pack(String),

    #[error("reshard: {0}")]
    Reshard(String),

    #[error("graph: {0}")]
    Graph(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { path: path.into(), message: message.into() }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Io { .. } => 2,
            Error::PlanInvalid(_) | Error::Mesh(_) | Error::Graph(_) => 3,
            Error::Pack(_) => 4,
            Error::Reshard(_) => 5,
        }
    }
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| format!("[{}] {}", v.code.as_str(), v.message)).collect::<Vec<_>>().join("; ")
}

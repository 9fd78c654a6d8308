use mcrp_core::heatmap::HeatmapError;
use mcrp_core::{McrpError, ModelError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flag values or an inconsistent configuration.
    #[error("{0}")]
    Usage(String),
    #[error("cannot load model: {0}")]
    Model(#[from] ModelError),
    #[error("cannot load image: {0}")]
    Image(HeatmapError),
    #[error("cannot write {path}: {detail}")]
    Output { path: String, detail: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Engine(String),
    #[error("conservation check failed at {failed} layer(s)")]
    Conservation { failed: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Model(_) | CliError::Image(_) | CliError::Output { .. } | CliError::Engine(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Conservation { .. } => 4,
        }
    }

    pub fn output(path: &std::path::Path, detail: impl ToString) -> Self {
        CliError::Output {
            path: path.display().to_string(),
            detail: detail.to_string(),
        }
    }
}

impl From<McrpError> for CliError {
    fn from(e: McrpError) -> Self {
        if e.is_numerical() {
            return CliError::Numerical(e.to_string());
        }
        match e {
            McrpError::InvalidConfig(m) => CliError::Usage(m),
            McrpError::Model(m) => CliError::Model(m),
            other => CliError::Engine(other.to_string()),
        }
    }
}

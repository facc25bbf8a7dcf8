//! Scenario runner: reads a JSON scenario, runs the requested analyses and
//! writes machine-readable reports.

pub mod config;
pub mod report;
pub mod run;

use serde_json::json;

pub use config::ScenarioConfig;
pub use report::{Bundle, Verdict};
pub use run::{run, RunOptions};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Module(#[from] compete_core::Error),
    #[error("i/o error: {0}")]
    Io(String),
}

impl RunError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Module(e) => e.kind(),
            Self::Io(_) => "io",
        }
    }

    /// Structured form written to the error stream.
    pub fn to_json(&self) -> serde_json::Value {
        json!({ "error": { "kind": self.kind(), "message": self.to_string() } })
    }
}

//! Report bundle and writers.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::RunError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Content {
    Json(Value),
    Text(Vec<u8>),
}

/// Reports of one run, each keyed by file name. Contents are deterministic
/// for a given configuration and seed; the timestamp is added on writing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Bundle {
    pub files: Vec<(String, Content)>,
    pub verdicts: Vec<Verdict>,
}

impl Bundle {
    pub fn add_json(&mut self, name: &str, v: Value) {
        self.files.push((name.into(), Content::Json(v)));
    }

    pub fn add_text(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.into(), Content::Text(bytes)));
    }

    pub fn all_passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    pub fn get_json(&self, name: &str) -> Option<&Value> {
        self.files.iter().find_map(|(n, c)| match c {
            Content::Json(v) if n == name => Some(v),
            _ => None,
        })
    }

    /// Writes every report into `dir`. JSON reports are wrapped as
    /// `{"header": {"generated_at_unix": ..}, "report": ..}`.
    pub fn write(&self, dir: &Path, generated_at_unix: u64) -> Result<Vec<PathBuf>, RunError> {
        std::fs::create_dir_all(dir).map_err(|e| RunError::Io(format!("{}: {e}", dir.display())))?;
        let mut written = Vec::with_capacity(self.files.len());
        for (name, content) in &self.files {
            let path = dir.join(name);
            let bytes = match content {
                Content::Json(v) => {
                    let doc = json!({ "header": { "generated_at_unix": generated_at_unix }, "report": v });
                    let mut s = serde_json::to_string_pretty(&doc).map_err(|e| RunError::Io(e.to_string()))?;
                    s.push('\n');
                    s.into_bytes()
                }
                Content::Text(b) => b.clone(),
            };
            std::fs::write(&path, bytes).map_err(|e| RunError::Io(format!("{}: {e}", path.display())))?;
            written.push(path);
        }
        Ok(written)
    }
}

//! Run manifests: the resolved command of a run plus its provenance.
//!
//! `command` holds the fully resolved arguments of the subcommand, so the
//! run can be repeated without consulting defaults again.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TOOL_NAME: &str = "ordseg";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub command: serde_json::Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub duration_seconds: f64,
    pub argv: Vec<String>,
}

impl RunManifest {
    pub fn new(subcommand: impl Into<String>, command: serde_json::Value) -> Self {
        RunManifest {
            tool: TOOL_NAME.to_string(),
            version: TOOL_VERSION.to_string(),
            subcommand: subcommand.into(),
            command,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            duration_seconds: 0.0,
            argv: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("manifest is always serialisable");
        text.push('\n');
        text
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            format: "manifest",
            offset: byte_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let before: usize = text.lines().take(line.saturating_sub(1)).map(|l| l.len() + 1).sum();
    (before + column.saturating_sub(1)).min(text.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let mut m = RunManifest::new("loss", serde_json::json!({"gamma": 10.0, "lambda_o2": 0.5}));
        m.inputs.push("logits.opm".into());
        m.seed = Some(7);
        let back = RunManifest::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert!(RunManifest::from_json("{\n  \"tool\": 3\n}").is_err());
    }
}

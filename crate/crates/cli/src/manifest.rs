use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command run: enough to repeat it and to find everything
/// it wrote.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Full argument vector, with any auto-drawn seed made explicit.
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_ms: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            args: std::env::args().skip(1).collect(),
            config: serde_json::Value::Null,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_ms: 0.0,
            started: Some(Instant::now()),
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    pub fn output(&mut self, p: &Path) {
        self.outputs.push(p.display().to_string());
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    /// Writes `manifest.json` into `dir`, listing itself among the outputs.
    pub fn finish(mut self, dir: &Path) -> std::io::Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        self.output(&path);
        if let Some(t) = self.started {
            self.wall_ms = t.elapsed().as_secs_f64() * 1e3;
        }
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use ssmlab_core::{Error, Result};

#[derive(Debug, Serialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
}

/// Written at the root of every output directory. Artifact paths are
/// relative to that root.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Parameter tensors held at their initial values during training.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub frozen: Vec<String>,
    pub artifacts: Vec<PathBuf>,
    pub stages: Vec<Stage>,
    #[serde(skip)]
    root: PathBuf,
    #[serde(skip)]
    clock: Option<(String, Instant)>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn new(root: &Path, command: &str, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            config,
            seeds: Vec::new(),
            frozen: Vec::new(),
            artifacts: Vec::new(),
            stages: Vec::new(),
            root: root.to_path_buf(),
            clock: None,
        }
    }

    pub fn begin(&mut self, stage: impl Into<String>) {
        self.end();
        self.clock = Some((stage.into(), Instant::now()));
    }

    pub fn end(&mut self) {
        if let Some((name, t0)) = self.clock.take() {
            self.stages.push(Stage {
                name,
                seconds: t0.elapsed().as_secs_f64(),
            });
        }
    }

    pub fn record(&mut self, path: &Path) {
        let rel = path.strip_prefix(&self.root).unwrap_or(path).to_path_buf();
        if !self.artifacts.contains(&rel) {
            self.artifacts.push(rel);
        }
    }

    pub fn write(mut self) -> Result<PathBuf> {
        self.end();
        for a in &self.artifacts {
            if !self.root.join(a).exists() {
                return Err(Error::Contract(format!("listed artifact {} is missing", a.display())));
            }
        }
        let path = self.root.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(self.root)
    }
}

//! Run manifests: everything needed to re-execute a run and verify its
//! outputs, written as `manifest.json` next to the artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Io(format!("cannot hash {}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    Ok(out)
}

/// Collects inputs, artifacts, and timings over the life of one command.
pub struct RunManifest {
    out_dir: PathBuf,
    command_line: Vec<String>,
    seed: u64,
    deterministic: bool,
    threads: usize,
    config: BTreeMap<String, String>,
    inputs: Vec<(PathBuf, String)>,
    artifacts: Vec<(PathBuf, String)>,
    timings: BTreeMap<String, f64>,
    started: Instant,
}

impl RunManifest {
    pub fn new(
        out_dir: &Path,
        seed: u64,
        deterministic: bool,
        threads: usize,
        config: BTreeMap<String, String>,
    ) -> Self {
        RunManifest {
            out_dir: out_dir.to_path_buf(),
            command_line: std::env::args().collect(),
            seed,
            deterministic,
            threads,
            config,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            timings: BTreeMap::new(),
            started: Instant::now(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        let hash = sha256_file(path)?;
        self.inputs.push((path.to_path_buf(), hash));
        Ok(())
    }

    /// Record an artifact below the output directory after it is written.
    pub fn add_artifact(&mut self, path: &Path) -> Result<(), CliError> {
        let hash = sha256_file(path)?;
        self.artifacts.push((path.to_path_buf(), hash));
        Ok(())
    }

    pub fn record_timing(&mut self, phase: &str, seconds: f64) {
        self.timings.insert(phase.to_string(), seconds);
    }

    pub fn write(mut self) -> Result<PathBuf, CliError> {
        self.timings
            .insert("total".into(), self.started.elapsed().as_secs_f64());
        let files = |items: &[(PathBuf, String)]| -> Vec<serde_json::Value> {
            items
                .iter()
                .map(|(p, h)| serde_json::json!({ "path": p.display().to_string(), "sha256": h }))
                .collect()
        };
        let doc = serde_json::json!({
            "toolkit_version": env!("CARGO_PKG_VERSION"),
            "command_line": self.command_line,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "threads": self.threads,
            "config": self.config,
            "inputs": files(&self.inputs),
            "artifacts": files(&self.artifacts),
            "timings_seconds": self.timings,
        });
        let path = self.out_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&doc)
            .map_err(|e| CliError::Io(format!("manifest serialization: {e}")))?;
        std::fs::write(&path, text)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Create the output directory if needed.
pub fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::io::sha256_file;
use crate::CliError;

#[derive(Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// `manifest.json`, one per output directory.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<String>,
    pub wall_clock_s: f64,
    /// Command-specific facts (chosen r, failure counts, ...).
    pub summary: serde_json::Value,
}

pub struct ManifestBuilder {
    command: String,
    seed: u64,
    config: serde_json::Value,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
    start: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64, config: &impl Serialize) -> Result<Self, CliError> {
        Ok(ManifestBuilder {
            command: command.to_string(),
            seed,
            config: serde_json::to_value(config).map_err(|e| CliError::Input(e.to_string()))?,
            inputs: Vec::new(),
            outputs: Vec::new(),
            start: Instant::now(),
        })
    }

    pub fn set_config(&mut self, config: &impl Serialize) -> Result<(), CliError> {
        self.config = serde_json::to_value(config).map_err(|e| CliError::Input(e.to_string()))?;
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(InputDigest { path: path.display().to_string(), sha256: sha256_file(path)? });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        self.outputs.push(name);
    }

    pub fn write(self, dir: &Path, summary: serde_json::Value) -> Result<(), CliError> {
        let m = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_clock_s: self.start.elapsed().as_secs_f64(),
            summary,
        };
        let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Input(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

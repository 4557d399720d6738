//! Per-command run record written next to the command's outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use microdepth::dataset::FORMAT_VERSION;

#[derive(Debug, Serialize)]
pub struct Versions {
    pub microdepth: &'static str,
    pub umde_format: u32,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the canonical JSON of the effective configuration.
    pub config_digest: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub versions: Versions,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// First layer reached by the backward pass, for training commands.
    pub stop_layer: Option<usize>,
    pub wall_time_s: f64,
}

pub struct RunRecorder {
    started: Instant,
    pub manifest: RunManifest,
}

pub fn digest(config: &serde_json::Value) -> String {
    // serde_json maps are ordered by key, so this text is canonical.
    let text = serde_json::to_string(config).expect("json value serializes");
    hex(&Sha256::digest(text.as_bytes()))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunRecorder {
    pub fn start(command: &str, config: serde_json::Value) -> Self {
        RunRecorder {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                config_digest: digest(&config),
                config,
                seeds: Vec::new(),
                versions: Versions {
                    microdepth: env!("CARGO_PKG_VERSION"),
                    umde_format: FORMAT_VERSION,
                },
                inputs: Vec::new(),
                outputs: Vec::new(),
                stop_layer: None,
                wall_time_s: 0.0,
            },
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.manifest.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.manifest.outputs.push(p.to_path_buf());
    }

    pub fn finish(mut self, path: &Path) -> std::io::Result<()> {
        self.manifest.wall_time_s = self.started.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest).map_err(std::io::Error::other)?;
        std::fs::write(path, text + "\n")
    }
}

/// `<path>.run.json`.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".run.json");
    p.into()
}

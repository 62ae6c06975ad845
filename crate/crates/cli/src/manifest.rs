//! Per-run manifest: what ran, with which config and inputs.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// `key = value` lines. Identical manifests mean identical inputs, so the
/// outputs they describe are reproducible byte for byte.
pub struct Manifest {
    lines: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str) -> Manifest {
        let mut m = Manifest { lines: Vec::new() };
        m.push("command", command);
        m.push("promptverify-core", promptverify_core::VERSION);
        m.push("promptverify-cli", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    pub fn config(&mut self, text: &str, cfg: &RunConfig) {
        self.push("config_sha256", sha256_hex(text.as_bytes()));
        self.push("seed.pretrain", cfg.pretrain.seed);
        self.push("seed.finetune", cfg.finetune.train.seed);
        self.push("seed.folds", cfg.finetune.fold_seed);
        self.push("seed.prompt", cfg.prompt.train.seed);
        self.push("seed.snapshot", cfg.snapshot.seed);
        self.push("seed.stacker", cfg.stacker.train.seed);
    }

    /// Records the digest of an input file under `role`.
    pub fn input(&mut self, role: &str, path: &Path) -> std::io::Result<()> {
        let digest = file_sha256(path)?;
        self.push(&format!("input.{role}"), digest);
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.render())
    }
}

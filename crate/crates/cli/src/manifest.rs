//! Run manifests: `key=value` text recording the effective config, seeds,
//! and content hashes of every input and output.

use std::path::Path;

use stm_core::sha256_hex;

use crate::config::{RunConfig, MANIFEST_HEADER};
use crate::error::CliError;

pub const FILE_NAME: &str = "manifest.txt";

pub struct Manifest {
    lines: Vec<String>,
}

impl Manifest {
    pub fn new(subcommand: &str, cfg: &RunConfig) -> Self {
        let echo = cfg.echo();
        let mut lines = vec![
            MANIFEST_HEADER.to_string(),
            format!("subcommand={subcommand}"),
            format!("stm_version={}", env!("CARGO_PKG_VERSION")),
            format!("config_hash={}", sha256_hex(echo.as_bytes())),
        ];
        lines.extend(echo.lines().map(|l| format!("config.{l}")));
        Self { lines }
    }

    pub fn add(&mut self, key: &str, value: impl std::fmt::Display) {
        self.lines.push(format!("{key}={value}"));
    }

    /// Records an input file's path and content hash under `input.<label>`.
    pub fn input(&mut self, label: &str, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::input(path, e))?;
        self.add(&format!("input.{label}.path"), path.display());
        self.add(&format!("input.{label}.sha256"), sha256_hex(&bytes));
        Ok(())
    }

    /// Records an output file (relative to the run directory) by hash.
    pub fn output(&mut self, dir: &Path, name: &str) -> Result<(), CliError> {
        let bytes = std::fs::read(dir.join(name)).map_err(|e| CliError::io(dir.join(name), e))?;
        self.add(&format!("output.{name}"), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let mut text = self.lines.join("\n");
        text.push('\n');
        let path = dir.join(FILE_NAME);
        std::fs::write(&path, text).map_err(|e| CliError::io(path, e))
    }
}

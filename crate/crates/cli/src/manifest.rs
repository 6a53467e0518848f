//! Run manifests: what was run, on which bytes, producing which bytes.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::Command;
use crate::Format;

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command_line: Vec<String>,
    /// The parsed command with input paths made absolute; replay runs this.
    pub command: Command,
    pub seed: u64,
    pub format: Format,
    /// sha256 of the canonical JSON of `command`, `seed` and `format`.
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    /// Absolute input path to sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the manifest) to sha256.
    pub outputs: BTreeMap<String, String>,
    pub warnings: Vec<String>,
    pub exit_code: i32,
    /// Not part of any compared output.
    pub wall_clock_ms: u128,
}

pub fn config_hash(command: &Command, seed: u64, format: Format) -> Result<String> {
    let v = serde_json::json!({ "command": command, "seed": seed, "format": format });
    Ok(sha256_hex(mixopt_core::io::to_canonical_json(&v)?.as_bytes()))
}

/// File-system side of a command run: reads are digested, writes land in the
/// output directory and are digested.
pub struct Ctx {
    pub seed: u64,
    pub format: Format,
    out_dir: PathBuf,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    pub warnings: Vec<String>,
    pub not_converged: bool,
}

impl Ctx {
    pub fn new(seed: u64, format: Format, out_dir: PathBuf) -> Self {
        Self {
            seed,
            format,
            out_dir,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            warnings: vec![],
            not_converged: false,
        }
    }

    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let key = std::path::absolute(path)?.display().to_string();
        self.inputs.insert(key, sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn read_json<T: serde::de::DeserializeOwned>(&mut self, path: &Path) -> Result<T> {
        let bytes = self.read(path)?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let rel = Path::new(name);
        if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
            bail!("output `{name}` must be a plain path inside --out-dir");
        }
        if name == MANIFEST_NAME {
            bail!("`{MANIFEST_NAME}` is reserved for the run manifest");
        }
        mixopt_core::io::write_atomic(&self.out_dir.join(rel), bytes)?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let s = mixopt_core::io::to_canonical_json(value)?;
        self.write(name, s.as_bytes())
    }

    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
        self.write(name, &bytes)
    }

    /// Writes `stem.json` (the serialized rows) or `stem.csv` per `--format`.
    pub fn write_table<T: Serialize>(&mut self, stem: &str, rows: &[T], header: &[&str], flat: impl Fn(&T) -> Vec<String>) -> Result<()> {
        match self.format {
            Format::Json => self.write_json(&format!("{stem}.json"), &rows),
            Format::Csv => self.write_csv(&format!("{stem}.csv"), header, &rows.iter().map(flat).collect::<Vec<_>>()),
        }
    }

    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        eprintln!("warning: {msg}");
        self.warnings.push(msg);
    }

    pub fn into_parts(self) -> (BTreeMap<String, String>, BTreeMap<String, String>, Vec<String>) {
        (self.inputs, self.outputs, self.warnings)
    }
}

/// Floats in CSV cells: shortest round-trip form.
pub fn cell(v: f64) -> String {
    format!("{v:?}")
}

/// Digest mismatches between a manifest and the files it names.
pub fn verify(manifest: &RunManifest, dir: &Path) -> Vec<String> {
    let mut bad = vec![];
    for (path, want) in &manifest.inputs {
        match std::fs::read(path) {
            Ok(b) if sha256_hex(&b) == *want => {}
            Ok(_) => bad.push(format!("input {path} changed")),
            Err(e) => bad.push(format!("input {path}: {e}")),
        }
    }
    for (name, want) in &manifest.outputs {
        match std::fs::read(dir.join(name)) {
            Ok(b) if sha256_hex(&b) == *want => {}
            Ok(_) => bad.push(format!("output {name} changed")),
            Err(e) => bad.push(format!("output {name}: {e}")),
        }
    }
    bad
}

//! `mixopt`: swarm sampling, surrogate fitting, mixture solving and mixture
//! reuse from the shell. Every run leaves a manifest that `replay` can rerun.

mod commands;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use commands::{Command, ReplayArgs};
use manifest::{config_hash, sha256_hex, verify, Ctx, RunManifest, MANIFEST_NAME};
use mixopt_core::MixError;

#[derive(Debug, Parser)]
#[command(name = "mixopt", version, about = "Data-mixture optimization and mixture reuse")]
struct Cli {
    /// Master seed; every random stream derives from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory for outputs and the run manifest (default: current directory).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Format of tabular reports.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_NOT_CONVERGED: u8 = 4;

/// Replay found different bytes.
#[derive(Debug)]
struct Mismatch(Vec<String>);

impl std::fmt::Display for Mismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0.join("; "))
    }
}

impl std::error::Error for Mismatch {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Mismatch>().is_some() {
        return 1;
    }
    match err.downcast_ref::<MixError>() {
        Some(e) if e.is_infeasibility() => EXIT_INFEASIBLE,
        Some(MixError::Io(_)) => 1,
        _ if err.downcast_ref::<std::io::Error>().is_some() => 1,
        _ => EXIT_VALIDATION,
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MIXOPT_THREADS") {
        let n: usize = v.parse().with_context(|| format!("MIXOPT_THREADS={v}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

/// Runs `command` into `out_dir` and writes its manifest. Returns the exit code.
fn execute(command: &Command, seed: u64, format: Format, out_dir: &Path, command_line: Vec<String>) -> Result<u8> {
    let start = Instant::now();
    std::fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut ctx = Ctx::new(seed, format, out_dir.to_path_buf());
    command.run(&mut ctx)?;
    let code = if ctx.not_converged { EXIT_NOT_CONVERGED } else { 0 };
    let (inputs, outputs, warnings) = ctx.into_parts();
    let manifest = RunManifest {
        command_line,
        command: command.clone(),
        seed,
        format,
        config_hash: config_hash(command, seed, format)?,
        versions: BTreeMap::from([
            ("mixopt-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("mixopt-core".to_string(), mixopt_core::VERSION.to_string()),
        ]),
        inputs,
        outputs,
        warnings,
        exit_code: code as i32,
        wall_clock_ms: start.elapsed().as_millis(),
    };
    mixopt_core::io::write_json(&out_dir.join(MANIFEST_NAME), &manifest)?;
    Ok(code)
}

fn replay(a: &ReplayArgs, out_dir: Option<&Path>) -> Result<u8> {
    let text = std::fs::read_to_string(&a.manifest).with_context(|| format!("reading {}", a.manifest.display()))?;
    let m: RunManifest = serde_json::from_str(&text).context("parsing manifest")?;
    if config_hash(&m.command, m.seed, m.format)? != m.config_hash {
        bail!(Mismatch(vec!["config hash does not match the recorded command".into()]));
    }
    let dir = a.manifest.parent().unwrap_or(Path::new("."));
    let bad = verify(&m, dir);
    if !bad.is_empty() {
        bail!(Mismatch(bad));
    }
    if a.verify_only {
        println!("{} inputs and {} outputs match the manifest", m.inputs.len(), m.outputs.len());
        return Ok(0);
    }
    let tmp;
    let target = match out_dir {
        Some(d) => d.to_path_buf(),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    if std::path::absolute(&target)? == std::path::absolute(dir)? {
        bail!("replay needs an --out-dir different from the recorded run");
    }
    let code = execute(&m.command, m.seed, m.format, &target, m.command_line.clone())?;
    let mut diffs = vec![];
    for (name, want) in &m.outputs {
        match std::fs::read(target.join(name)) {
            Ok(b) if sha256_hex(&b) == *want => {}
            Ok(_) => diffs.push(format!("{name} differs")),
            Err(e) => diffs.push(format!("{name}: {e}")),
        }
    }
    if !diffs.is_empty() {
        bail!(Mismatch(diffs));
    }
    println!("replayed {} outputs byte-identical", m.outputs.len());
    Ok(code)
}

fn run(cli: Cli) -> Result<u8> {
    init_threads()?;
    let mut command = cli.command;
    if let Command::Replay(a) = &command {
        return replay(a, cli.out_dir.as_deref());
    }
    command.resolve_inputs()?;
    let out_dir = cli.out_dir.unwrap_or_else(|| PathBuf::from("."));
    execute(&command, cli.seed, cli.format, &out_dir, std::env::args().collect())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

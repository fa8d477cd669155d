use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::Value;
use xfer_core::bench::{run_xferbench, BenchmarkConfig, Mode, Profile, RunOptions, TargetSpec, ENGINE_VERSION};
use xfer_core::corpus::read_jsonl;

use crate::user_error;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProfileArg {
    Paper,
    Desk,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Pretrain,
    NoPretrain,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Source corpus (JSONL, one token-id array per line). Not used with
    /// `--mode no-pretrain`.
    pub corpus: Option<PathBuf>,
    /// JSON config; keys override the profile defaults, flags override both.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub profile: Option<ProfileArg>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Directory of targets: `.txt` files, text subdirectories or `.jsonl` corpora.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Concurrent fine-tuning jobs [default: targets, capped at CPU count].
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory for the report, manifest and training artifacts.
    #[arg(long, default_value = "xfer-out")]
    pub out: PathBuf,
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn resolve_config(args: &RunArgs) -> Result<(BenchmarkConfig, Option<String>)> {
    let file = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))
                .map_err(|e| user_error(format!("{e:#}")))?;
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| user_error(format!("{}: invalid JSON: {e}", path.display())))?;
            if !value.is_object() {
                return Err(user_error(format!("{}: config must be a JSON object", path.display())));
            }
            Some((text, value))
        }
        None => None,
    };
    let profile = match (args.profile, file.as_ref().and_then(|(_, v)| v.get("profile"))) {
        (Some(ProfileArg::Paper), _) => Profile::Paper,
        (Some(ProfileArg::Desk), _) => Profile::Desk,
        (None, Some(p)) => serde_json::from_value(p.clone()).map_err(|e| user_error(format!("profile: {e}")))?,
        (None, None) => Profile::Paper,
    };
    let mut value = serde_json::to_value(BenchmarkConfig::for_profile(profile, Vec::new()))?;
    if let Some((_, patch)) = &file {
        merge(&mut value, patch.clone());
    }
    let mut config: BenchmarkConfig = serde_json::from_value(value).map_err(|e| user_error(format!("config: {e}")))?;
    config.profile = profile;
    if let Some(mode) = args.mode {
        config.mode = match mode {
            ModeArg::Pretrain => Mode::Pretrain,
            ModeArg::NoPretrain => Mode::NoPretrain,
        };
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(dir) = &args.targets {
        config.targets = TargetSpec::discover(dir)?;
    }
    if config.targets.is_empty() {
        return Err(user_error(
            "no targets: pass --targets DIR or list them in the config file",
        ));
    }
    config.validate()?;
    Ok((config, file.map(|(text, _)| text)))
}

#[derive(Serialize)]
struct Manifest {
    command_line: Vec<String>,
    config_file: Option<String>,
    config: BenchmarkConfig,
    config_hash: String,
    profile: Profile,
    seed: u64,
    jobs: usize,
    engine_version: &'static str,
    cli_version: &'static str,
    started: String,
    finished: String,
    outputs: Vec<PathBuf>,
}

fn artifacts_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = fs::read_dir(&d) else { continue };
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

pub fn run(args: RunArgs) -> Result<()> {
    let started = chrono::Utc::now();
    let (config, config_file) = resolve_config(&args)?;
    let source = match config.mode {
        Mode::Pretrain => {
            let path = args
                .corpus
                .as_ref()
                .ok_or_else(|| user_error("a source corpus is required unless --mode no-pretrain"))?;
            let name = path
                .file_stem()
                .map_or("source".into(), |s| s.to_string_lossy().into_owned());
            Some((name, read_jsonl(path)?))
        }
        Mode::NoPretrain => {
            if args.corpus.is_some() {
                log::warn!("ignoring the corpus argument in no-pretrain mode");
            }
            None
        }
    };
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    let jobs = args.jobs.unwrap_or_else(|| config.targets.len().min(cpus)).max(1);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    log::info!(
        "{} profile, {} target(s), {jobs} job(s), seed {}",
        config.profile.name(),
        config.targets.len(),
        config.seed
    );

    let options = RunOptions {
        jobs,
        artifacts: Some(args.out.clone()),
    };
    let output = run_xferbench(source.as_ref().map(|(n, c)| (n.as_str(), c)), &config, &options)?;
    let report = output.report;
    report.save(args.out.join("report.json"))?;

    let manifest = Manifest {
        command_line: std::env::args().collect(),
        config_file,
        config_hash: config.hash(),
        profile: config.profile,
        seed: config.seed,
        config,
        jobs,
        engine_version: ENGINE_VERSION,
        cli_version: env!("CARGO_PKG_VERSION"),
        started: started.to_rfc3339(),
        finished: chrono::Utc::now().to_rfc3339(),
        outputs: artifacts_under(&args.out),
    };
    let manifest_path = args.out.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", manifest_path.display()))?;

    match report.score {
        Some(score) if report.is_complete() => {
            println!("{score}");
            Ok(())
        }
        _ => {
            let failed: Vec<String> = report.failures.iter().map(|(t, e)| format!("{t}: {e}")).collect();
            anyhow::bail!(
                "{} target(s) failed; partial report written\n  {}",
                failed.len(),
                failed.join("\n  ")
            )
        }
    }
}

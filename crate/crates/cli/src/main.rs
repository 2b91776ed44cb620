use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::{json, Value};

use misspec_rl::config::{apply_override, expand_sweep, read_config_value, split_assignment, take_sweep_axes, RunConfig};
use misspec_rl::env::{validate_spec, MlmdpSpec};
use misspec_rl::harness::{self, RunResult};
use misspec_rl::report::{read_curve, render_svg, summarize, write_run_outputs};
use misspec_rl::verify::{format_table, run_suite, VerifyConfig};
use misspec_rl::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_FAILURE: u8 = 2;

#[derive(Parser)]
#[command(name = "misspec-rl", version, about = "Regret experiments for linear RL under misspecification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Only print warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override applied before validation, e.g. algorithm.eps_tol=0.5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed (suite seed for verify).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one config and write per-seed regret CSVs plus a summary.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Run every cell of the config's "sweep" axes.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// Run the invariant suite and print a pass/fail table.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Also write the results as JSON to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render regret CSVs to an SVG.
    Plot {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        /// Output file, or a directory that receives regret.svg.
        #[arg(long, default_value = "regret.svg")]
        out: PathBuf,
    },
    /// Check a spec file, or the spec a run config describes.
    ValidateSpec {
        spec: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let outcome = match cli.command {
        Command::Run { common, out } => cmd_run(&common, &out),
        Command::Sweep { common, out } => cmd_sweep(&common, &out),
        Command::Verify { common, out } => cmd_verify(&common, out.as_deref()),
        Command::Plot { csv, out } => cmd_plot(&csv, &out),
        Command::ValidateSpec { spec, common } => cmd_validate_spec(spec.as_deref(), &common),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Csv(_) => EXIT_CONFIG,
        Error::Invariant(_) | Error::Numeric(_) | Error::Logic(_) => EXIT_FAILURE,
    }
}

/// Reads the config document (or `{}`), then applies `--seed` under
/// `seed_key` and every `--set`, in order.
fn load_document(common: &Common, seed_key: &str) -> Result<(Value, Option<PathBuf>), Error> {
    let (mut doc, base) = match &common.config {
        Some(path) => (read_config_value(path)?, path.parent().map(Path::to_path_buf)),
        None => (json!({}), None),
    };
    if let Some(seed) = common.seed {
        apply_override(&mut doc, seed_key, json!(seed))?;
    }
    for raw in &common.overrides {
        let (key, value) = split_assignment(raw)?;
        apply_override(&mut doc, key, value)?;
    }
    Ok((doc, base))
}

fn require_config(common: &Common) -> Result<(), Error> {
    if common.config.is_none() {
        return Err(Error::Config("--config is required".into()));
    }
    Ok(())
}

fn report_violations(result: &RunResult) {
    for run in &result.runs {
        if run.violations.total > 0 {
            warn!("seed {}: {} invariant violations recorded", run.seed, run.violations.total);
            for sample in run.violations.samples.iter().take(3) {
                warn!("  {sample}");
            }
        }
    }
}

fn execute(config: &RunConfig, base: Option<&Path>, out: &Path) -> Result<RunResult, Error> {
    info!(
        "run {}: {} on {} seed(s), K = {}",
        config.run_id,
        config.algorithm.name(),
        config.seeds.len(),
        config.episodes
    );
    let result = harness::run(config, base)?;
    report_violations(&result);
    for path in write_run_outputs(out, &result)? {
        info!("wrote {}", path.display());
    }
    Ok(result)
}

fn cmd_run(common: &Common, out: &Path) -> Result<u8, Error> {
    require_config(common)?;
    let (mut doc, base) = load_document(common, "master_seed")?;
    if !take_sweep_axes(&mut doc)?.is_empty() {
        warn!("ignoring sweep axes; use the sweep subcommand to expand them");
    }
    let config = RunConfig::from_value(doc)?;
    let result = execute(&config, base.as_deref(), out)?;
    let summary = summarize(&result)?;
    println!(
        "{}: mean R(K) = {:.6}, R(K)/K = {:.6}, violations = {}",
        summary.run_id, summary.mean_cum_regret, summary.mean_regret_per_episode, summary.total_violations
    );
    Ok(0)
}

fn cmd_sweep(common: &Common, out: &Path) -> Result<u8, Error> {
    require_config(common)?;
    let (mut doc, base) = load_document(common, "master_seed")?;
    let axes = take_sweep_axes(&mut doc)?;
    let base_id = doc.get("run_id").and_then(Value::as_str).unwrap_or("run").to_string();
    let cells = expand_sweep(&doc, &axes)?;
    info!("sweep {base_id}: {} cell(s)", cells.len());
    let mut index = Vec::with_capacity(cells.len());
    for cell in &cells {
        let result = execute(&cell.config, base.as_deref(), out)?;
        let summary = summarize(&result)?;
        let assignments: serde_json::Map<String, Value> = cell.assignments.iter().cloned().collect();
        println!(
            "{}: {} mean R(K) = {:.6}, R(K)/K = {:.6}",
            summary.run_id,
            Value::Object(assignments.clone()),
            summary.mean_cum_regret,
            summary.mean_regret_per_episode
        );
        index.push(json!({
            "index": cell.index,
            "run_id": summary.run_id,
            "assignments": assignments,
            "mean_cum_regret": summary.mean_cum_regret,
            "mean_regret_per_episode": summary.mean_regret_per_episode,
            "total_violations": summary.total_violations,
        }));
    }
    let path = out.join(format!("sweep_{base_id}.json"));
    let doc = json!({ "sweep_version": 1, "axes": axes, "cells": index });
    fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
    info!("wrote {}", path.display());
    Ok(0)
}

fn cmd_verify(common: &Common, out: Option<&Path>) -> Result<u8, Error> {
    let (doc, base) = load_document(common, "seed")?;
    let config = VerifyConfig::from_value(doc)?;
    let results = run_suite(&config, base.as_deref())?;
    print!("{}", format_table(&results));
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(&results)? + "\n")?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(0)
    } else {
        println!("failed: {}", failed.join(", "));
        Ok(EXIT_FAILURE)
    }
}

fn cmd_plot(csvs: &[PathBuf], out: &Path) -> Result<u8, Error> {
    let curves = csvs.iter().map(|p| read_curve(p)).collect::<Result<Vec<_>, _>>()?;
    let target = if out.is_dir() || out.extension().is_none() {
        out.join("regret.svg")
    } else {
        out.to_path_buf()
    };
    if let Some(dir) = target.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&target, render_svg(&curves))?;
    info!("wrote {} ({} curve(s))", target.display(), curves.len());
    Ok(0)
}

fn cmd_validate_spec(spec_path: Option<&Path>, common: &Common) -> Result<u8, Error> {
    let spec = match (spec_path, &common.config) {
        (Some(path), None) => MlmdpSpec::load(path).map_err(|e| Error::Config(format!("cannot load spec {}: {e}", path.display())))?,
        (None, Some(_)) => {
            let (mut doc, base) = load_document(common, "master_seed")?;
            take_sweep_axes(&mut doc)?;
            RunConfig::from_value(doc)?.load_spec(base.as_deref())?
        }
        _ => return Err(Error::Config("give either a spec path or --config".into())),
    };
    let report = validate_spec(&spec);
    println!("{}", serde_json::to_string_pretty(&report)?);
    if report.is_valid() {
        info!("spec is valid, eps_mis = {:.6e}", report.eps_mis_realized);
        Ok(0)
    } else {
        for v in &report.violations {
            eprintln!("violation: {}", v.message);
        }
        Ok(EXIT_FAILURE)
    }
}

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context as _, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::commands::Context;
use crate::config::{ConfigError, RunConfig};
use crate::output::{sha256_hex, Manifest, OutputDir};

/// Solver and verification runner for mean-field-type control problems.
#[derive(Parser)]
#[command(name = "mftc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory (default: <output.dir>/<subcommand>).
    #[arg(long, global = true, value_name = "PATH")]
    out_dir: Option<PathBuf>,

    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides a config key, e.g. --set numerics.grid.n_points=801.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Worker threads.
    #[arg(long, global = true, env = "MFTC_WORKERS")]
    workers: Option<usize>,

    /// Table format.
    #[arg(long, global = true, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Binary,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Feasibility windows, majorant tables and growth-assumption checks.
    Audit,
    /// Solve the fixed point and write V, DV, the policy and the flow.
    Solve,
    /// Solve and compare against the closed-form oracle of the family.
    Validate,
    /// Solve, then simulate the optimal flow three ways.
    Simulate,
    /// Value of the solved problem and its Monte-Carlo cost.
    Value,
    /// Optimal cost against perturbed policies.
    Verify {
        #[arg(long, default_value_t = 10)]
        perturbations: usize,
    },
    /// Directional value derivative and the derivative field.
    Derivative {
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
    },
    /// Master-equation residual at probe points.
    Master {
        #[arg(
            long,
            value_delimiter = ',',
            allow_hyphen_values = true,
            default_values_t = [-2.0, -1.0, 0.0, 1.0, 2.0]
        )]
        probes: Vec<f64>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Audit => "audit",
            Command::Solve => "solve",
            Command::Validate => "validate",
            Command::Simulate => "simulate",
            Command::Value => "value",
            Command::Verify { .. } => "verify",
            Command::Derivative { .. } => "derivative",
            Command::Master { .. } => "master",
        }
    }
}

fn overrides(cli: &Cli) -> Vec<String> {
    let mut out = cli.set.clone();
    if let Some(seed) = cli.seed {
        out.push(format!("seed={seed}"));
    }
    if let Some(f) = cli.format {
        let name = match f {
            FormatArg::Csv => "csv",
            FormatArg::Binary => "binary",
            FormatArg::Both => "both",
        };
        out.push(format!("output.format=\"{name}\""));
    }
    out
}

fn load(cli: &Cli) -> Result<(RunConfig, Vec<String>), ConfigError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid("--config PATH is required".into()))?;
    let sets = overrides(cli);
    Ok((RunConfig::load(path, &sets)?, sets))
}

fn dispatch(cli: &Cli, ctx: &Context, dir: &mut OutputDir) -> Result<bool> {
    match &cli.command {
        Command::Audit => commands::audit(ctx, dir),
        Command::Solve => commands::solve(ctx, dir),
        Command::Validate => commands::validate(ctx, dir),
        Command::Simulate => commands::simulate(ctx, dir),
        Command::Value => commands::value(ctx, dir),
        Command::Verify { perturbations } => commands::verify(ctx, dir, *perturbations),
        Command::Derivative { eps } => commands::derivative(ctx, dir, *eps),
        Command::Master { probes } => commands::master(ctx, dir, probes),
    }
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let (cfg, sets) = match load(cli) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(2));
        }
    };
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let name = cli.command.name();
    let root = cli
        .out_dir
        .clone()
        .unwrap_or_else(|| cfg.output.dir.join(name));
    let effective = cfg.to_toml();
    let seed = cfg.seed;
    let format = cfg.output.format;
    let ctx = match Context::new(cfg) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(2));
        }
    };
    let mut dir = OutputDir::create(&root, format)?;
    dir.write_bytes("config.toml", effective.as_bytes())?;
    log::info!("{name}: writing to {}", dir.path().display());

    let code: u8 = match dispatch(cli, &ctx, &mut dir) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            let kind = e
                .downcast_ref::<mftc_core::Error>()
                .map_or("ERROR", mftc_core::Error::kind);
            eprintln!("error: {e:#}");
            dir.write_json(
                "error.json",
                &json!({"kind": kind, "message": format!("{e:#}")}),
            )?;
            1
        }
    };
    dir.finish(Manifest {
        tool: "mftc",
        version: env!("CARGO_PKG_VERSION"),
        subcommand: name.to_string(),
        seed,
        workers: rayon::current_num_threads(),
        config_file: "config.toml",
        config_sha256: sha256_hex(effective.as_bytes()),
        overrides: sets,
        started_unix,
        wall_time_s: started.elapsed().as_secs_f64(),
        exit_code: code as i32,
        files: Vec::new(),
    })?;
    Ok(ExitCode::from(code))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

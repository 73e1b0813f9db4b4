//! Command-line front end for `filmrelax`.
//!
//! One subcommand per invocation. Each reads a TOML config (every key is
//! optional), runs, and writes `<out>/<command>.json`. Exit codes: `0` ok,
//! `1` error, `2` finished with warnings.

pub mod checks;
pub mod commands;
pub mod config;
pub mod presets;
pub mod report;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

pub use commands::{cmd_check, cmd_cosserat, cmd_density, cmd_gamma, cmd_qcx, cmd_tabulate, Context};
pub use config::RunConfig;
pub use report::{Report, Status};

/// Environment variable that overrides `--threads`.
pub const THREADS_ENV: &str = "FILMRELAX_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config{}: {message}", key_suffix(path))]
    Config { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Integrand(#[from] filmrelax::integrand::IntegrandError),
    #[error(transparent)]
    Field(#[from] filmrelax::field::FieldError),
    #[error(transparent)]
    Cell(#[from] filmrelax::CellError),
    #[error(transparent)]
    Gamma(#[from] filmrelax::gamma::GammaError),
    #[error(transparent)]
    Table(#[from] filmrelax::tabulate::TableError),
    #[error("{0}")]
    Usage(String),
}

fn key_suffix(path: &str) -> String {
    if path.is_empty() || path == "." {
        String::new()
    } else {
        format!(" key `{path}`")
    }
}

impl CliError {
    /// The config key a parse error points at, if any.
    pub fn config_key(&self) -> Option<&str> {
        match self {
            CliError::Config { path, .. } if !path.is_empty() && path != "." => Some(path),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Membrane density at (x₀, F̄).
    Density,
    /// Cosserat density at (x₀, F̄, z).
    Cosserat,
    /// Quasiconvexification of W(x; ·) at F.
    Qcx,
    /// Thin-film minimization at decreasing thickness against the limit.
    Gamma,
    /// Sample a density table.
    Tabulate,
    /// Run the invariant suite.
    Check,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportFormat {
    Csv,
}

#[derive(Debug, Parser)]
#[command(name = "filmrelax", version, about = "Effective densities of heterogeneous thin films")]
pub struct Args {
    #[command(subcommand)]
    pub command: Command,
    /// TOML config; omitted means all defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker cap; the FILMRELAX_THREADS environment variable takes precedence.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for every stochastic choice (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Also write CSV extracts.
    #[arg(long, global = true)]
    pub export: Option<ExportFormat>,
}

/// Loads the config and applies command-line overrides.
pub fn resolve_config(args: &Args) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => config::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.output.dir = o.clone();
    }
    if args.export == Some(ExportFormat::Csv) && !cfg.output.export.contains(&config::Export::Csv) {
        cfg.output.export.push(config::Export::Csv);
    }
    Ok(cfg)
}

/// Thread cap: the environment value wins over the flag; zero or garbage
/// falls back to rayon's default.
pub fn thread_cap(flag: Option<usize>, env: Option<&str>) -> Option<usize> {
    env.and_then(|v| v.trim().parse().ok()).or(flag).filter(|&n| n > 0)
}

pub fn execute(command: Command, cfg: &RunConfig, ctx: &Context) -> Result<Report, CliError> {
    match command {
        Command::Density => cmd_density(cfg, ctx),
        Command::Cosserat => cmd_cosserat(cfg, ctx),
        Command::Qcx => cmd_qcx(cfg, ctx),
        Command::Gamma => cmd_gamma(cfg, ctx),
        Command::Tabulate => cmd_tabulate(cfg, ctx),
        Command::Check => cmd_check(cfg, ctx),
    }
}

fn command_name(c: Command) -> &'static str {
    match c {
        Command::Density => "density",
        Command::Cosserat => "cosserat",
        Command::Qcx => "qcx",
        Command::Gamma => "gamma",
        Command::Tabulate => "tabulate",
        Command::Check => "check",
    }
}

/// Runs one invocation and returns the process exit code.
pub fn run(args: &Args) -> i32 {
    let cfg = match resolve_config(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let env = std::env::var(THREADS_ENV).ok();
    let cap = thread_cap(args.threads, env.as_deref());
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cap {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return 1;
        }
    };
    let ctx = Context::new(&cfg.output.dir);
    let started = Instant::now();
    let outcome = pool.install(|| execute(args.command, &cfg, &ctx));
    let mut report = match outcome {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {} failed: {e}", command_name(args.command));
            let w = cfg.integrand.resolve().ok();
            report::Report::new(
                command_name(args.command),
                Status::Error,
                vec![e.to_string()],
                serde_json::Value::Null,
                report::Provenance::new(&cfg, w.as_ref()),
            )
        }
    };
    report.runtime.seconds = started.elapsed().as_secs_f64();
    report.runtime.threads = pool.current_num_threads();
    report.runtime.out_dir = cfg.output.dir.display().to_string();
    let csv = cfg.output.export.contains(&config::Export::Csv);
    if let Err(e) = report.write(&cfg.output.dir, csv) {
        eprintln!("error: {e}");
        return 1;
    }
    for w in &report.body.warnings {
        eprintln!("warning: {w}");
    }
    println!("{}", summary(&report));
    report.exit_code()
}

/// One line for the terminal; the report file has everything.
fn summary(r: &Report) -> String {
    let res = &r.body.result;
    let detail = match r.body.command.as_str() {
        _ if res.is_null() => String::new(),
        "density" | "cosserat" => format!("value = {} at L* = {}", res["value"], res["l_star"]),
        "qcx" => format!("QW = {} (W = {}, laminate bound {})", res["value"], res["unrelaxed"], res["lamination_bound"]),
        "gamma" => format!("limit energy {}, largest gap {}", res["limit_energy"], res["max_gap"]),
        "tabulate" => format!("{} nodes, {} invalid", res["nodes"], res["invalid"]),
        "check" => {
            let checks = res["checks"].as_array().map_or(0, Vec::len);
            let failed = r.body.warnings.len();
            format!("{} of {checks} checks passed", checks.saturating_sub(failed))
        }
        _ => String::new(),
    };
    let status = serde_json::to_value(r.body.status).expect("status serializes");
    format!("{}: {} {detail}", r.body.command, status.as_str().unwrap_or(""))
}

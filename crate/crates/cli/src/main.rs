//! `refsnake` command-line driver.
//!
//! Exit codes: 0 success, 1 config error, 2 acceptance-test failure,
//! 3 runtime failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use commands::{Run, RunError, Subcommand};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    /// Sample systems and write forests, snapshots and total mass.
    Simulate,
    /// Reflect sampled systems and write reflected paths and snapshots.
    Reflect,
    /// Forest/contour round trips.
    Roundtrip,
    /// Discrete local time against upcrossing counts.
    Localtime,
    /// Oscillation tables and fitted exponents.
    Scaling,
    /// Separation profiles after reflected branch points.
    Branchpoint,
    /// Feller-law tests for total and descendant mass.
    Feller,
    /// Tagged central particle of ordered Brownian motions.
    Harris,
}

impl From<Command> for Subcommand {
    fn from(c: Command) -> Self {
        match c {
            Command::Simulate => Self::Simulate,
            Command::Reflect => Self::Reflect,
            Command::Roundtrip => Self::Roundtrip,
            Command::Localtime => Self::Localtime,
            Command::Scaling => Self::Scaling,
            Command::Branchpoint => Self::Branchpoint,
            Command::Feller => Self::Feller,
            Command::Harris => Self::Harris,
        }
    }
}

/// Branching particle systems with reflecting historical paths.
///
/// Any config field can also be given as `--field value`, e.g.
/// `--horizon 0.5` or `--initial.kind atoms`.
#[derive(Debug, Parser)]
#[command(name = "refsnake", version)]
struct Cli {
    command: Command,
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    replicas: Option<usize>,
    /// Config override `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Rewrites `--key value` and `--key=value` for config fields into
/// `--set key=value`.
fn rewrite_overrides(args: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.into_iter();
    if let Some(first) = it.next() {
        out.push(first);
    }
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| !f.is_empty()) else {
            out.push(a);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if config::RESERVED.contains(&name.as_str()) {
            out.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => match it.next() {
                Some(v) => v,
                None => {
                    out.push(a);
                    continue;
                }
            },
        };
        out.push("--set".into());
        out.push(format!("{}={value}", name.replace('-', "_")));
    }
    out
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse_from(rewrite_overrides(std::env::args())) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    ExitCode::from(execute(cli))
}

fn execute(cli: Cli) -> u8 {
    let mut overrides = Vec::new();
    for s in &cli.set {
        match s.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                eprintln!("error: override {s:?} is not of the form key=value");
                return 1;
            }
        }
    }
    let flags = [
        ("seed", cli.seed.map(|v| v.to_string())),
        ("epsilon", cli.epsilon.map(|v| format!("{v:?}"))),
        ("replicas", cli.replicas.map(|v| v.to_string())),
    ];
    overrides.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    let cmd = Subcommand::from(cli.command);
    let cfg = match config::load(cli.config.as_deref(), &overrides, cmd != Subcommand::Harris).and_then(|c| {
        c.validate(cmd.embeds())?;
        Ok(c)
    }) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return 1;
        }
    };
    if let Err(RunError::Runtime(e) | RunError::Config(e)) = commands::prepare_out(&cli.out) {
        eprintln!("error: {e}");
        return 3;
    }
    let jobs = cli
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let mut run = Run::new(cfg, cli.out.clone(), jobs);
    let (status, code, error) = match commands::run(cmd, &mut run) {
        Ok(()) if run.failures.is_empty() => ("ok", 0, None),
        Ok(()) => ("acceptance_failed", 2, Some(run.failures.join("; "))),
        Err(RunError::Config(e)) => ("config_error", 1, Some(e)),
        Err(RunError::Runtime(e)) => ("runtime_error", 3, Some(e)),
    };
    if let Some(e) = &error {
        eprintln!("{status}: {e}");
    }
    match run.write_manifest(cmd.name(), status, code, error.as_deref()) {
        Ok(manifest) => {
            let summary = serde_json::json!({
                "command": cmd.name(),
                "status": status,
                "exit_code": code,
                "results": manifest["results"],
            });
            println!("{summary}");
            code
        }
        Err(RunError::Runtime(e) | RunError::Config(e)) => {
            eprintln!("cannot write manifest: {e}");
            3
        }
    }
}

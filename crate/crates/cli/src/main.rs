//! `recency-lab`: runs the simulation study and writes CSV artifacts plus a
//! JSON manifest per command.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numerical
//! failure, 4 I/O error.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CliError;
use config::{parse_ks, RunConfig};
use manifest::Manifest;

#[derive(Parser, Debug)]
#[command(
    name = "recency-lab",
    version,
    about = "Recency dropout simulation lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Configuration override `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write simulated trajectories to trajectories.csv.
    Simulate {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
    },
    /// Train one model; writes model.ckpt and train_log.csv.
    Train,
    /// Evaluate a checkpoint; writes metrics.csv and heatmap.csv.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the dropout sweep grid; writes sweep.csv.
    Sweep,
    /// Eigenvalue spectrum of chained hidden-state Jacobians; writes spectrum.csv.
    Jacobian {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Lags such as `1,2,5` or `1-99`.
        #[arg(long)]
        ks: Option<String>,
    },
    /// Cluster-mass bias curve d(k); writes bias_curve.csv.
    BiasCurve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Lags such as `1,2,5` or `1-99`.
        #[arg(long)]
        ks: Option<String>,
    },
    /// Print the resolved configuration in file form.
    Config,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Sweep => "sweep",
            Command::Jacobian { .. } => "jacobian",
            Command::BiasCurve { .. } => "bias-curve",
            Command::Config => "config",
        }
    }

    fn checkpoint(&self) -> Option<&Path> {
        match self {
            Command::Eval { checkpoint }
            | Command::Jacobian { checkpoint, .. }
            | Command::BiasCurve { checkpoint, .. } => Some(checkpoint),
            _ => None,
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::default();
    if let Some(path) = &cli.config {
        config.apply_file(path)?;
    }
    for o in &cli.overrides {
        config.apply_override(o)?;
    }
    if let Some(seed) = cli.seed {
        config.train.seed = seed;
    }
    match &cli.command {
        Command::Simulate { count, length } => {
            config.simulate_count = count.unwrap_or(config.simulate_count);
            config.simulate_length = length.unwrap_or(config.simulate_length);
        }
        Command::Jacobian { ks: Some(ks), .. } => config.jacobian_ks = parse_ks("--ks", ks)?,
        Command::BiasCurve { ks: Some(ks), .. } => config.bias_ks = parse_ks("--ks", ks)?,
        _ => {}
    }
    config.validate()?;
    Ok(config)
}

fn execute(cli: &Cli, config: &RunConfig, manifest: &mut Manifest) -> Result<(), CliError> {
    let out = cli.out.as_path();
    if let Some(ckpt) = cli.command.checkpoint() {
        manifest.add_input(ckpt).map_err(|source| CliError::Io {
            path: ckpt.to_path_buf(),
            source,
        })?;
    }
    match &cli.command {
        Command::Simulate { .. } => commands::simulate(config, out, manifest),
        Command::Train => commands::train_model(config, out, manifest),
        Command::Eval { checkpoint } => commands::eval(config, checkpoint, out, manifest),
        Command::Sweep => commands::sweep(config, out, manifest),
        Command::Jacobian { checkpoint, .. } => {
            commands::jacobian(config, checkpoint, out, manifest)
        }
        Command::BiasCurve { checkpoint, .. } => commands::bias(config, checkpoint, out, manifest),
        Command::Config => unreachable!("handled before a manifest is opened"),
    }
}

fn fail(err: &CliError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    if let Command::Config = cli.command {
        print!("{}", config.to_text());
        return ExitCode::SUCCESS;
    }
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
    {
        eprintln!("error: cannot start the thread pool: {e}");
        return ExitCode::from(4);
    }
    if let Err(source) = std::fs::create_dir_all(&cli.out) {
        return fail(&CliError::Io {
            path: cli.out.clone(),
            source,
        });
    }
    let name = cli.command.name();
    let manifest_path = Manifest::path(&cli.out, name);
    let mut manifest = Manifest::start(name, config.resolved(), config.train.seed);
    if let Err(source) = manifest.write(&manifest_path) {
        return fail(&CliError::Io {
            path: manifest_path,
            source,
        });
    }
    let result = execute(&cli, &config, &mut manifest);
    let (code, message) = match &result {
        Ok(()) => (0, None),
        Err(e) => (e.exit_code(), Some(e.to_string())),
    };
    manifest.finish(code, message);
    if let Err(source) = manifest.write(&manifest_path) {
        return fail(&CliError::Io {
            path: manifest_path,
            source,
        });
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use fedseq::experiment::{load_log, resolve_config, run_experiment, Environment, ExperimentConfig};
use fedseq::ingest::synth::generate_synthetic;
use fedseq::ingest::{
    coefficient_of_variation, daily_active_users, mean_sessions_per_user, sessionize, write_events,
};

#[derive(Parser)]
#[command(name = "fedseq", version, about = "Federated sequence-aware next-app prediction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clean an event log and write it with a summary.
    Ingest(Common),
    /// Train once on a day-based split and report all models on the test days.
    Static(Common),
    /// Replay the log in cycles, evaluating before each update.
    Dynamic(Common),
    /// Compare privacy mechanisms against the non-private run.
    Privacy(Common),
    /// Generate a synthetic event log.
    Synth(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = resolve_config(self.config.as_deref(), std::env::vars()).context("config")?;
        if let Some(seed) = self.seed {
            config.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            config.output = out.clone();
        }
        Ok(config)
    }
}

fn echo(config: &ExperimentConfig) -> Result<()> {
    eprintln!("# resolved config\n{}", config.to_toml()?);
    Ok(())
}

fn experiment(args: &Common, environment: Environment) -> Result<()> {
    let mut config = args.resolve()?;
    config.environment = environment;
    echo(&config)?;
    let summary = run_experiment(&config)?;
    for file in summary.files.keys() {
        println!("{}", config.output.join(file).display());
    }
    Ok(())
}

fn ingest(args: &Common) -> Result<()> {
    let config = args.resolve()?;
    echo(&config)?;
    fs::create_dir_all(&config.output).context("output")?;
    for &seed in &config.seeds {
        let log = load_log(&config.data, seed).context("ingest")?;
        let sessions = sessionize(&log, config.data.session_gap);
        let days = daily_active_users(&log);
        let summary = serde_json::json!({
            "events": log.len(),
            "users": log.n_users(),
            "apps": log.n_apps(),
            "sessions": sessions.len(),
            "mean_sessions_per_user": mean_sessions_per_user(&sessions),
            "days": days.len(),
            "daily_active_users_cv": coefficient_of_variation(&days),
        });
        let dir = seed_dir(&config.output, seed);
        fs::create_dir_all(&dir)?;
        write_events(&log, dir.join("events.csv")).context("ingest")?;
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        println!("{}", dir.join("events.csv").display());
    }
    Ok(())
}

fn synth(args: &Common) -> Result<()> {
    let config = args.resolve()?;
    echo(&config)?;
    for &seed in &config.seeds {
        let data = generate_synthetic(&config.data.synthetic.with_seed(seed)).context("synth")?;
        let dir = seed_dir(&config.output, seed);
        fs::create_dir_all(&dir)?;
        write_events(&data.log, dir.join("events.csv")).context("synth")?;
        println!("{}", dir.join("events.csv").display());
    }
    Ok(())
}

fn seed_dir(root: &Path, seed: u64) -> PathBuf {
    root.join(format!("seed-{seed}"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Static(a) => experiment(a, Environment::Static),
        Command::Dynamic(a) => experiment(a, Environment::Dynamic),
        Command::Privacy(a) => experiment(a, Environment::Privacy),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lab_cli::{run, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "lab", version, about = "Degenerate parabolic finite element laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Run one experiment config and write its artifacts.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config's `out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads.
        #[arg(long, env = "LAB_JOBS")]
        jobs: Option<usize>,
        /// Base seed (overrides the config's `seed`).
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let Sub::Run { config, out, jobs, seed } = cli.command;
    let mut cfg = ExperimentConfig::load(&config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = &out {
        cfg.out = Some(o.to_string_lossy().into_owned());
    }
    let dir = PathBuf::from(cfg.out.clone().unwrap_or_else(|| "lab-out".into()));
    if let Some(n) = jobs {
        if n == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let outcome = run(&cfg, &dir)?;
    log::info!("wrote {} artifacts to {}", outcome.artifacts.len(), dir.display());
    if outcome.failures.is_empty() {
        println!("ok: {} artifacts in {}", outcome.artifacts.len(), dir.display());
        Ok(())
    } else {
        Err(CliError::Assertion(outcome.failures))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Assertion(rows) = &e {
                for r in rows {
                    eprintln!("  {r}");
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use demandkit_cli::commands::{self, TrainMode};
use demandkit_cli::config::{ModelKind, RunConfig, SweepModel};
use demandkit_cli::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "demandkit", version, about = "Auction demand estimation with learned embeddings")]
struct Cli {
    /// TOML run config; DEMANDKIT_* environment variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    Stage1,
    Stage2,
    Direct,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate,
    /// Train one stage.
    Train {
        #[arg(value_enum)]
        stage: Stage,
    },
    /// Score models on the validation and zero-shot slices.
    Evaluate {
        /// Comma-separated subset of ts,de,ols.
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
    },
    /// Integrated-gradients attributions.
    Attribute {
        #[arg(long, value_delimiter = ',')]
        listings: Vec<String>,
        /// stage1:<output> or stage2:rank<j>.
        #[arg(long)]
        target: Option<String>,
    },
    /// Counterfactual feature sweep.
    Sweep {
        /// Use ground-truth primitives instead of the trained model.
        #[arg(long)]
        oracle: bool,
    },
    /// Hedonic OLS benchmark.
    Ols,
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<Vec<PathBuf>> {
    let cfg = resolve(&cli)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build_global()
        .map_err(|e| CliError::config(format!("worker pool: {e}")))?;
    match cli.command {
        Command::Simulate => commands::cmd_simulate(&cfg),
        Command::Train { stage } => {
            let mode = match stage {
                Stage::Stage1 => TrainMode::Stage1,
                Stage::Stage2 => TrainMode::Stage2,
                Stage::Direct => TrainMode::Direct,
            };
            commands::cmd_train(&cfg, mode)
        }
        Command::Evaluate { models } => {
            let models = if models.is_empty() {
                cfg.evaluation.models.clone()
            } else {
                models.iter().map(|m| ModelKind::parse(m)).collect::<CliResult<Vec<_>>>()?
            };
            let files = commands::cmd_evaluate(&cfg, &models)?;
            if let Some(table) = files.iter().find(|f| f.ends_with("comparison.txt")) {
                print!("{}", std::fs::read_to_string(table)?);
            }
            Ok(files)
        }
        Command::Attribute { listings, target } => {
            let listings = if listings.is_empty() {
                cfg.attribution.listings.clone()
            } else {
                listings
            };
            let target = target.unwrap_or_else(|| cfg.attribution.target.clone());
            commands::cmd_attribute(&cfg, &listings, &target)
        }
        Command::Sweep { oracle } => {
            let model = if oracle { SweepModel::Oracle } else { cfg.sweep.model };
            commands::cmd_sweep(&cfg, model)
        }
        Command::Ols => commands::cmd_ols(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(files) => {
            for f in files {
                log::info!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

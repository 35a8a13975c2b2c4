use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

/// Failure with the process exit code to report.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    /// Bad input: missing or malformed files, invalid configuration.
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "maskfill",
    version,
    about = "Mask-then-infill adversarial attacks on text classifiers"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Flat TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Model file for the train commands, output directory otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the naive Bayes victim and report clean accuracy.
    TrainVictim {
        #[arg(long)]
        train: Option<PathBuf>,
        /// Split to report accuracy on.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Train the trigram infiller on a dataset or a one-sentence-per-line text file.
    TrainMlm {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Attack a dataset; writes trace.jsonl and metrics.json.
    Attack {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Attack once per (k, l) threshold pair and write a CSV.
    Sweep {
        /// For example "k=0.001,0.005;l=0.5,0.7".
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Attack the training split and write it back with the successful
    /// adversarial examples appended.
    Augment {
        #[arg(long)]
        train: Option<PathBuf>,
    },
    /// Tally the POS tags touched by successful attacks in a trace.
    AnalyzePos {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Write a synthetic two-class corpus with word vectors, a tagger lexicon
    /// and a starter config.
    Synth {
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(workers) = common.workers {
        config.workers = workers;
    }
    if let Some(out) = &common.out {
        config.out = Some(out.clone());
    }
    config.attack_config()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = load_config(&cli.common)?;
    let out_flag = cli.common.out.clone();
    match cli.command {
        Command::TrainVictim { train, eval, alpha } => {
            config.train = train.or(config.train);
            config.data = eval.or(config.data);
            config.alpha = alpha.unwrap_or(config.alpha);
            commands::train_victim(&config, out_flag)
        }
        Command::TrainMlm { corpus, delta } => {
            config.train = corpus.or(config.train);
            config.delta = delta.unwrap_or(config.delta);
            commands::train_mlm(&config, out_flag)
        }
        Command::Attack { data } => {
            config.data = data.or(config.data);
            commands::attack(&config)
        }
        Command::Sweep { grid, data } => {
            config.data = data.or(config.data);
            if let Some(grid) = grid {
                (config.grid_k, config.grid_l) = commands::parse_grid(&grid)?;
            }
            commands::sweep(&config)
        }
        Command::Augment { train } => {
            config.train = train.or(config.train);
            commands::augment(&config)
        }
        Command::AnalyzePos { trace } => commands::analyze_pos(&config, &trace),
        Command::Synth { n_train, n_test } => commands::synth(&config, n_train, n_test),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}

//! `ssft`: synthesize data, train, evaluate, run the ablation matrix and the
//! auxiliary-set sweep.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssft::ablation;
use ssft::evaluator::Direction;
use ssft::{Result, SsftError};

use crate::commands::{EvalArgs, SweepArgs};
use crate::config::{EvalMode, RunConfig, SizeSpec};

#[derive(Parser)]
#[command(
    name = "ssft",
    version,
    about = "Shared-specific feature transfer on synthetic two-modality data"
)]
struct Cli {
    /// Print the configuration and exit: the defaults on its own, the
    /// resolved configuration when given with a subcommand.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed (the data seed for `synth`, the run seed otherwise).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test splits.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model; writes final.ssft, log.jsonl and config.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.jsonl and test.jsonl.
        #[arg(long, default_value = "data")]
        data: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation mode; defaults to every mode in the configuration.
        #[arg(long, value_enum)]
        mode: Option<EvalMode>,
        /// Query direction.
        #[arg(long, value_parser = parse_direction)]
        direction: Option<Direction>,
        /// Also write the all-queries test affinity as JSON.
        #[arg(long)]
        dump_affinity: Option<PathBuf>,
    },
    /// Train and evaluate ablation rows over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Rows to run, e.g. `1,10-12`.
        #[arg(long, default_value = "1-12")]
        rows: String,
        /// Number of consecutive seeds per row, starting at the run seed.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Sweep the number of queries sharing one graph.
    SweepAux {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sizes as counts, percentages of the query set or `all`, e.g. `1,25%,50%,all`.
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Ablate { common, .. }
            | Command::SweepAux { common, .. } => common,
        }
    }

    fn default_out(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "data",
            Command::Train { .. } => "run",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablation",
            Command::SweepAux { .. } => "sweep",
        }
    }
}

fn parse_direction(s: &str) -> std::result::Result<Direction, String> {
    Direction::parse(s).map_err(|e| e.to_string())
}

/// Loads the configuration and applies command-line overrides.
fn resolve(cmd: &Command) -> Result<RunConfig> {
    let common = cmd.common();
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        match cmd {
            Command::Synth { .. } => cfg.generator.seed = seed,
            _ => cfg.seed = seed,
        }
    }
    match cmd {
        Command::Eval {
            mode, direction, ..
        } => {
            if let Some(m) = mode {
                cfg.eval.modes = vec![*m];
            }
            if let Some(d) = direction {
                cfg.eval.direction = *d;
            }
        }
        Command::SweepAux { sizes, trials, .. } => {
            if let Some(s) = sizes {
                cfg.eval.aux_sizes = SizeSpec::parse_list(s)?;
            }
            if let Some(t) = trials {
                cfg.eval.aux_trials = *t;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let Some(cmd) = cli.command else {
        if cli.print_config {
            println!("{}", RunConfig::default().to_json());
            return Ok(());
        }
        return Err(SsftError::config(
            "no command given (synth, train, eval, ablate, sweep-aux; see --help)",
        ));
    };
    let cfg = resolve(&cmd)?;
    if cli.print_config {
        println!("{}", cfg.to_json());
        return Ok(());
    }
    cfg.validate()?;
    let out = cmd
        .common()
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(cmd.default_out()));
    match &cmd {
        Command::Synth { .. } => commands::synth(&cfg, &out),
        Command::Train { data, .. } => commands::train_cmd(&cfg, data, &out),
        Command::Eval {
            data,
            checkpoint,
            dump_affinity,
            ..
        } => commands::eval(
            &cfg,
            &EvalArgs {
                data_dir: data,
                checkpoint,
                out: &out,
                modes: cfg.eval.modes.clone(),
                dump_affinity: dump_affinity.clone(),
            },
        ),
        Command::Ablate {
            data, rows, seeds, ..
        } => {
            let rows = ablation::parse_rows(rows)?;
            commands::ablate(&cfg, data, &rows, *seeds, &out)
        }
        Command::SweepAux {
            data, checkpoint, ..
        } => commands::sweep_aux(
            &cfg,
            &SweepArgs {
                data_dir: data,
                checkpoint,
                out: &out,
                sizes: cfg.eval.aux_sizes.clone(),
                trials: cfg.eval.aux_trials,
            },
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                SsftError::Config(v) if v.len() > 1 => {
                    eprintln!("error: invalid configuration:");
                    for msg in v {
                        eprintln!("  - {msg}");
                    }
                }
                _ => eprintln!("error: {e}"),
            }
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}

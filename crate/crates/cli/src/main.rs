//! `setcomplete`: data generation, training, evaluation and completion from
//! the command line.
//!
//! Settings resolve as built-in defaults, then the `--config` TOML file, then
//! flags. Verbosity follows `SETCOMPLETE_LOG` (`error` .. `trace`).

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use setcomplete::model::Variant;

use crate::commands::{CompleteInputs, EvalInputs};
use crate::config::{Overrides, RunConfig};
use crate::manifest::RunManifest;

#[derive(Parser)]
#[command(
    name = "setcomplete",
    version,
    about = "Conditional set completion experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default `runs/<command>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing run in the output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (data.jsonl) and its ANN index.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain and freeze the set-matching scorer.
    TrainMatch {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train one CST variant or the sequential baseline.
    TrainCst {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Frozen scorer; required by CR and xR.
        #[arg(long)]
        scorer: Option<PathBuf>,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
    },
    /// Recall@k, accuracy, SMD and diversity of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Reject a checkpoint of any other variant.
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[arg(long)]
        scorer: Option<PathBuf>,
        /// Saved retrieval index (default: exact index over the split's items).
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Fill-in-the-blank accuracy of a scorer and/or a CST checkpoint.
    Finb {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        #[arg(long)]
        scorer: Option<PathBuf>,
    },
    /// Completion time against the number of missing items.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Trained st checkpoint (default: a freshly initialised one).
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Print the items completing a query outfit for the given categories.
    Complete {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// JSONL file whose first line is the query outfit.
        #[arg(long)]
        query: PathBuf,
        /// Comma-separated category ids, one per missing item.
        #[arg(long, value_delimiter = ',', required = true)]
        labels: Vec<u32>,
        #[arg(long)]
        index: Option<PathBuf>,
        /// Dataset whose catalog supplies the candidates when no index is given.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Restrict each retrieval to the requested category.
        #[arg(long)]
        filter: bool,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

/// Runs `body` inside a manifest that is finalised whatever the outcome.
fn with_manifest(
    name: &str,
    common: &Common,
    variant: Option<Variant>,
    body: impl FnOnce(&RunConfig, &mut RunManifest) -> Result<()>,
) -> Result<()> {
    let overrides = Overrides {
        seed: common.seed,
        variant,
    };
    let cfg = RunConfig::load(common.config.as_deref(), &overrides)?;
    let out = commands::out_dir(common.out.clone(), name);
    let seed = common.seed.unwrap_or(cfg.train.seed);
    let mut m = RunManifest::start(name, common.config.as_deref(), seed, &out, common.force)?;
    std::fs::write(m.artifact("config.toml"), toml::to_string(&cfg)?)?;
    let outcome = body(&cfg, &mut m);
    m.finish(&outcome)?;
    outcome
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => with_manifest("gen-data", &common, None, commands::gen_data),
        Command::TrainMatch { common, data } => {
            with_manifest("train-match", &common, None, |c, m| {
                commands::train_match(c, m, &data)
            })
        }
        Command::TrainCst {
            common,
            data,
            scorer,
            variant,
        } => with_manifest("train-cst", &common, variant, |c, m| {
            commands::train(c, m, &data, scorer.as_deref())
        }),
        Command::Eval {
            common,
            data,
            checkpoint,
            variant,
            scorer,
            index,
        } => with_manifest("eval", &common, None, |c, m| {
            let inp = EvalInputs {
                data: &data,
                checkpoint: &checkpoint,
                variant,
                scorer: scorer.as_deref(),
                index: index.as_deref(),
            };
            commands::eval(c, m, &inp)
        }),
        Command::Finb {
            common,
            data,
            checkpoint,
            variant,
            scorer,
        } => with_manifest("finb", &common, None, |c, m| {
            commands::finb(
                c,
                m,
                &data,
                checkpoint.as_deref(),
                variant,
                scorer.as_deref(),
            )
        }),
        Command::Bench {
            common,
            data,
            checkpoint,
            baseline,
            index,
        } => with_manifest("bench", &common, None, |c, m| {
            commands::bench(
                c,
                m,
                &data,
                &checkpoint,
                baseline.as_deref(),
                index.as_deref(),
            )
        }),
        Command::Complete {
            checkpoint,
            variant,
            query,
            labels,
            index,
            data,
            filter,
        } => {
            let picks = commands::complete(&CompleteInputs {
                checkpoint: &checkpoint,
                variant,
                query: &query,
                labels: &labels,
                index: index.as_deref(),
                data: data.as_deref(),
                filter,
            })?;
            for (id, cat, sim) in picks {
                println!("{id}\t{cat}\t{sim:.4}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SETCOMPLETE_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

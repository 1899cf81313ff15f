use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gphme_cli::{cmd_benchmark, cmd_export_tree, cmd_predict, cmd_train, FeatureInput, Overrides, RunConfig, THREADS_ENV};

#[derive(Parser)]
#[command(name = "gphme", version, about = "Gaussian-process-gated hierarchical mixtures of experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model on a whole dataset and write a checkpoint.
    Train {
        /// TOML run config.
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Run the fold protocol, optionally against a baseline config.
    Benchmark {
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Predict rows of a feature CSV with a trained checkpoint.
    Predict {
        checkpoint: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        /// Output CSV.
        #[arg(long, short)]
        output: PathBuf,
        #[arg(long, default_value_t = 50)]
        n_mc: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a DOT graph and JSON summary of the tree's behaviour on a dataset.
    ExportTree {
        checkpoint: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        /// Output directory.
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n_mc: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct InputArgs {
    /// Feature CSV.
    input: PathBuf,
    #[arg(long, default_value_t = ',')]
    delimiter: char,
    /// The CSV has no header row.
    #[arg(long)]
    no_header: bool,
    /// Zero-based column to skip, e.g. a label column. Repeatable.
    #[arg(long = "ignore-column")]
    ignore_columns: Vec<usize>,
}

impl From<InputArgs> for FeatureInput {
    fn from(a: InputArgs) -> Self {
        FeatureInput {
            path: a.input,
            delimiter: a.delimiter,
            has_header: !a.no_header,
            ignore_columns: a.ignore_columns,
        }
    }
}

fn load_config(path: &PathBuf, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(overrides);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, overrides, resume } => {
            let cfg = load_config(&config, &overrides)?;
            let out = cmd_train(&cfg, resume)?;
            println!(
                "trained {} epochs ({} steps) in {:.1}s; checkpoint {}",
                out.report.state.epoch,
                out.report.steps,
                out.report.seconds,
                out.checkpoint_path.display()
            );
        }
        Command::Benchmark { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let baseline = cfg
                .baseline
                .as_ref()
                .map(|p| RunConfig::load(p).context("baseline config"))
                .transpose()?;
            let out = cmd_benchmark(&cfg, baseline.as_ref())?;
            let mut reports = vec![out.model.clone()];
            reports.extend(out.baseline.clone());
            print!("{}", gphme::eval::render_table(&reports, out.comparison.as_ref()));
        }
        Command::Predict { checkpoint, input, output, n_mc, seed } => {
            let pred = cmd_predict(&checkpoint, &input.into(), &output, n_mc, seed)?;
            println!("wrote {} predictions to {}", pred.len(), output.display());
        }
        Command::ExportTree { checkpoint, input, out, n_mc, seed } => {
            let s = cmd_export_tree(&checkpoint, &input.into(), &out, n_mc, seed)?;
            println!("exported {} nodes to {}", s.nodes.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    log::warn!("cannot size the thread pool: {e}");
                }
            }
            _ => log::warn!("ignoring {THREADS_ENV}={v}: expected a positive integer"),
        }
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use moevrd::cli;
use moevrd::config::RunConfig;

/// Sparsely-gated mixture of relation experts: data generation, training and evaluation.
#[derive(Parser)]
#[command(name = "moevrd", version, about)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed, overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Dotted-path override such as `model.top_k=2`; repeatable, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test datasets.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score a checkpoint, or a predictions file, against a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write video-level relation predictions.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate across top-K values and seeds.
    Sweep {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Comma-separated K values; defaults to `sweep.k_values`.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Tab-separated K/mean/std file.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Routing statistics of a checkpoint on a dataset.
    GateStats {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(args: Cli) -> anyhow::Result<()> {
    if let Some(n) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = RunConfig::load(args.config.as_deref(), &overrides)?;
    match args.command {
        Command::Gen { out } => {
            let summary = cli::cmd_gen(&cfg, &out)?;
            for (split, s) in summary {
                println!(
                    "{split}: {} videos, {} tracklets, {} pairs, {} relations",
                    s.videos, s.tracklets, s.pairs, s.relations
                );
                for (p, c) in s.per_predicate {
                    println!("  {p:<12} {c}");
                }
            }
        }
        Command::Train { data, out, log } => {
            let s = cli::cmd_train(&cfg, &data, &out, log.as_deref())?;
            println!(
                "trained {} epochs on {} samples ({} parameters); task loss {:?} -> {:?}; {:.2} expert evaluations per sample",
                s.epochs, s.samples, s.parameters, s.first_task_loss, s.final_task_loss, s.expert_evals_per_sample
            );
            println!("checkpoint {}  log {}", out.display(), s.log.display());
        }
        Command::Eval {
            data,
            checkpoint,
            predictions,
            report,
        } => {
            let r = cli::cmd_eval(&cfg, &data, checkpoint.as_deref(), predictions.as_deref(), report.as_deref())?;
            print!("{}", r.table());
        }
        Command::Infer { data, checkpoint, out } => {
            let n = cli::cmd_infer(&cfg, &data, &checkpoint, &out)?;
            println!("wrote {n} predictions to {}", out.display());
        }
        Command::Sweep {
            train,
            test,
            k,
            out,
            plot,
        } => {
            let t = cli::cmd_sweep(&cfg, &train, &test, k.as_deref(), out.as_deref(), plot.as_deref())?;
            print!("{}", t.table());
        }
        Command::GateStats { data, checkpoint, out } => {
            let r = cli::cmd_gate_stats(&checkpoint, &data, out.as_deref())?;
            print!("{}", r.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<moevrd::Error>().map_or(1, moevrd::Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use dsg_core::experiment::{
    emit_table2, run_eval, run_experiment, run_footprint, run_train, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "dsg", version, about = "Dynamic sparse graph training on CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (flat JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the first sweep point; writes metrics.csv and model.ckpt.
    Train(Common),
    /// Evaluate a checkpoint under each selection mode; writes eval.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out>/model.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every sweep point; writes per-point metrics and
    /// costs plus summary.csv.
    Sweep(Common),
    /// Write the dimension-reduction search cost table.
    Table2 {
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Training and inference memory/compute reports per sparsity.
    Footprint(Common),
}

fn load(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(&c.config)
        .with_context(|| format!("loading {}", c.config.display()))?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    Ok(match cli.command {
        Command::Train(c) => run_train(&load(&c)?)?,
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common)?;
            let ck = checkpoint.unwrap_or_else(|| cfg.output_dir.join("model.ckpt"));
            vec![run_eval(&cfg, &ck)?]
        }
        Command::Sweep(c) => {
            let report = run_experiment(&load(&c)?)?;
            for r in &report.rows {
                eprintln!(
                    "gamma={:.2} eps={:.2} mode={} val_acc={:.4} sparsity={:.3} macs={}",
                    r.gamma, r.epsilon, r.mode, r.val_acc, r.mean_sparsity, r.macs_training
                );
            }
            report.files
        }
        Command::Table2 { out } => {
            let p = out.join("table2.csv");
            emit_table2(&p)?;
            vec![p]
        }
        Command::Footprint(c) => vec![run_footprint(&load(&c)?)?],
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

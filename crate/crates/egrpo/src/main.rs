use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use egrpo::checkpoint::Checkpoint;
use egrpo::commands::{self, Ablation};
use egrpo::config::ExperimentConfig;
use egrpo::document::plan_to_text;
use egrpo::{HarnessError, Result};

/// Entropy-aware GRPO experiments on a toy flow-matching task.
///
/// Any config key can be overridden on the command line as
/// `--<dotted.key> <value>` or `--<dotted.key>=<value>`, after the named flags.
#[derive(Parser)]
#[command(name = "egrpo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-step entropy table and chart for merge lengths 1, 2 and 4.
    EntropyProfile(Common),
    /// Print and save the adaptive merge plan.
    Plan(Common),
    /// Pretrain the base velocity model by flow matching.
    Pretrain(Common),
    /// Align a pretrained checkpoint with GRPO.
    Train(Common),
    /// Run an ablation grid over several seeds.
    Ablate {
        /// Which grid: tau, steps or merge.
        which: String,
        #[command(flatten)]
        common: Common,
    },
    /// Reward variance caused by one SDE step at selected steps.
    ProbeVariance(Common),
}

#[derive(Args)]
struct Common {
    /// Config file in the flat `key = value` format.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model checkpoint (train, probe-variance, ablate).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Config overrides, `--<dotted.key> <value>`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

fn apply_overrides(cfg: &mut ExperimentConfig, args: &[String]) -> Result<()> {
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let flag = arg
            .strip_prefix("--")
            .ok_or_else(|| HarnessError::config(format!("unexpected argument {arg:?}")))?;
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k, v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| HarnessError::config(format!("{flag}: missing value")))?;
                (flag, v.clone())
            }
        };
        cfg.set(key, &value)?;
    }
    Ok(())
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    apply_overrides(&mut cfg, &common.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn require_checkpoint(common: &Common) -> Result<Checkpoint> {
    let path = common
        .checkpoint
        .as_ref()
        .ok_or_else(|| HarnessError::config("--checkpoint is required for this command"))?;
    Checkpoint::load(path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::EntropyProfile(c) => {
            let cfg = load_config(&c)?;
            let out = cfg.resolved_output_dir();
            commands::cmd_entropy_profile(&cfg, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Plan(c) => {
            let cfg = load_config(&c)?;
            let (plan, _) = commands::cmd_plan(&cfg, &cfg.resolved_output_dir())?;
            print!("{}", plan_to_text(&plan));
        }
        Command::Pretrain(c) => {
            let cfg = load_config(&c)?;
            let out = cfg.resolved_output_dir();
            let report = commands::cmd_pretrain(&cfg, &out)?;
            println!(
                "final loss {}; checkpoint {}",
                report.summary_value("final_loss").unwrap_or("n/a"),
                out.join("model.ckpt").display()
            );
        }
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let path = c
                .checkpoint
                .as_ref()
                .ok_or_else(|| HarnessError::config("--checkpoint is required for train"))?;
            let (outcome, _) = commands::cmd_train(&cfg, path, &cfg.resolved_output_dir())?;
            println!(
                "baseline reward {:.4}, final reward {:.4}",
                outcome.baseline_reward(),
                outcome.final_reward()
            );
        }
        Command::Ablate { which, common } => {
            let which: Ablation = which.parse()?;
            let cfg = load_config(&common)?;
            let ckpt = require_checkpoint(&common)?;
            let (cells, _) = commands::cmd_ablate(&cfg, which, &ckpt.model, &cfg.resolved_output_dir())?;
            for cell in &cells {
                match &cell.result {
                    Ok((b, f)) => println!("{} seed {}: {b:.4} -> {f:.4}", cell.variant, cell.seed),
                    Err(e) => println!("{} seed {}: failed: {e}", cell.variant, cell.seed),
                }
            }
        }
        Command::ProbeVariance(c) => {
            let cfg = load_config(&c)?;
            let ckpt = require_checkpoint(&c)?;
            let (rows, _) = commands::cmd_probe_variance(&cfg, &ckpt.model, &cfg.resolved_output_dir())?;
            for r in rows {
                println!("k={} l={} mean={:.5} variance={:.6}", r.k, r.l, r.mean, r.variance);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

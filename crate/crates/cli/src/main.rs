//! `mdc`: generate data, train, evaluate and compare separation models.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdc_core::harness::{self, ExperimentConfig, RunSpec};
use mdc_core::Error;

#[derive(Parser)]
#[command(name = "mdc", version, about = "Deep clustering separation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override: `data.seed` for gen-data, the run seed list otherwise.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize train/val/eval scenes.
    GenData(Common),
    /// Train every (method, alpha, seed) run of the config.
    Train(Common),
    /// Score checkpoints (or oracle masks) on the eval split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Use ideal binary masks instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        /// Evaluate only this run id, e.g. `mdc_a1_s0`.
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        coordinates: usize,
    },
    /// Summarize DC vs M-DC across seeds.
    Compare(Common),
    /// Summarize chimera runs across alpha.
    SweepAlpha(Common),
}

fn load(common: &Common, seed_is_data: bool) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        if seed_is_data {
            cfg.data.seed = seed;
        } else {
            cfg.seeds = vec![seed];
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::GenData(c) => {
            let cfg = load(&c, true)?;
            let entries = harness::gen_data(&cfg)?;
            println!("wrote {} scenes to {}", entries.len(), cfg.data_dir().display());
        }
        Command::Train(c) => {
            let cfg = load(&c, false)?;
            for t in harness::train_runs(&cfg)? {
                match (t.log.best_epoch, t.log.best_val_loss()) {
                    (Some(epoch), Some(loss)) => println!(
                        "{}: {} epochs, best val loss {loss:.6} at epoch {epoch}",
                        t.run.id(),
                        t.log.epochs.len()
                    ),
                    _ => println!("{}: no epochs run, initial parameters kept", t.run.id()),
                }
            }
        }
        Command::Evaluate { common, oracle, checkpoint } => {
            let cfg = load(&common, false)?;
            let runs: Vec<Option<RunSpec>> = if oracle {
                vec![None]
            } else {
                let all = cfg.runs();
                match checkpoint {
                    Some(id) => vec![Some(
                        *all.iter()
                            .find(|r| r.id() == id)
                            .ok_or_else(|| Error::InvalidArgument(format!("no run {id:?} in the config")))?,
                    )],
                    None => all.into_iter().map(Some).collect(),
                }
            };
            for r in runs {
                let eval = harness::evaluate(&cfg, r.as_ref())?;
                let means = harness::MetricMeans::of(&eval.rows);
                let id = r.map_or_else(|| "oracle".to_string(), |r| r.id());
                println!("{id}: mean SI-SDRi {:.2} dB ({})", means.si_sdr_i, eval.mask_source);
            }
        }
        Command::Gradcheck { common, coordinates } => {
            let cfg = load(&common, false)?;
            let summary = harness::gradcheck(&cfg, coordinates)?;
            println!("{summary}");
            return Ok(summary.passed());
        }
        Command::Compare(c) => {
            let cfg = load(&c, false)?;
            let summary = harness::compare(&cfg)?;
            print!("{}", summary.csv);
            for m in &summary.missing {
                eprintln!("missing checkpoint: {}", cfg.checkpoint_path(m).display());
            }
            return Ok(summary.missing.is_empty());
        }
        Command::SweepAlpha(c) => {
            let cfg = load(&c, false)?;
            let summary = harness::sweep_alpha(&cfg)?;
            print!("{}", summary.csv);
            for m in &summary.missing {
                eprintln!("missing checkpoint: {}", cfg.checkpoint_path(m).display());
            }
            return Ok(summary.missing.is_empty());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

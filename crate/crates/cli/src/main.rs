use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use ean_core::run::{cmd_ablate, cmd_eval, cmd_gen_data, cmd_grad_check, cmd_profile, cmd_train, RunConfig};

#[derive(Parser)]
#[command(name = "ean", version, about = "Vectorized map-element detection head: data, training and analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Dotted config override, e.g. `train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the synthetic train and validation splits.
    GenData,
    /// Train a model and write checkpoints and a JSON-lines log.
    Train,
    /// Evaluate a checkpoint (or the ground-truth oracle) on the validation split.
    Eval,
    /// Count attention operations over the profiling grid.
    Profile,
    /// Run the finite-difference gradient suite.
    GradCheck,
    /// Train and evaluate the ablation rows.
    Ablate,
}

fn load(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.set.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Ok(v) = std::env::var("EAN_THREADS") {
        let cap: usize = v.parse().with_context(|| format!("EAN_THREADS={v} is not a count"))?;
        if cap == 0 {
            bail!("EAN_THREADS must be at least 1");
        }
        let mut cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
        cfg.train.threads = cfg.train.threads.min(cap);
        return Ok(cfg);
    }
    Ok(RunConfig::load(cli.config.as_deref(), &overrides)?)
}

fn run(cli: &Cli) -> Result<bool> {
    let cfg = load(cli)?;
    let out = &cli.out;
    match cli.command {
        Command::GenData => {
            for m in cmd_gen_data(&cfg, out)? {
                println!("{}: {} scenes, content {}", m.split, m.scene_count, m.content_hash);
            }
        }
        Command::Train => {
            let s = cmd_train(&cfg, out)?;
            let first = s.epoch_losses.first().copied().unwrap_or(f64::NAN);
            let last = s.epoch_losses.last().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} steps, loss {first:.4} -> {last:.4}, checkpoint {}",
                s.steps,
                s.final_checkpoint.display()
            );
        }
        Command::Eval => {
            let r = cmd_eval(&cfg, out)?;
            for c in &r.classes {
                let aps: Vec<String> = c
                    .per_threshold
                    .iter()
                    .map(|t| format!("AP@{}={}", t.threshold, t.ap.map_or("-".into(), |a| format!("{a:.4}"))))
                    .collect();
                println!("{:?}: {}", c.class, aps.join(" "));
            }
            println!("mAP {:.4} over {} scenes", r.map, r.scenes);
        }
        Command::Profile => {
            for r in cmd_profile(&cfg, out)? {
                println!(
                    "M={} N={} d={}: measured {:.5} predicted {:.5}",
                    r.m, r.n, r.d, r.measured, r.predicted
                );
            }
        }
        Command::GradCheck => {
            let r = cmd_grad_check(&cfg, out)?;
            for c in &r.results {
                println!(
                    "{} {:<32} max rel err {:.3e}",
                    if c.passed { "ok  " } else { "FAIL" },
                    c.name,
                    c.max_rel_error
                );
            }
            if !r.passed() {
                eprintln!("gradient check failed");
                return Ok(false);
            }
        }
        Command::Ablate => print!("{}", cmd_ablate(&cfg, out)?.markdown()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tubempc::harness::{self, ExperimentConfig};
use tubempc::Result;

#[derive(Parser)]
#[command(
    name = "tubempc",
    version,
    about = "Learned tracking-error tubes and Dynamic Tube MPC"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate tracker rollouts and write the datasets.
    Datagen(Common),
    /// Train a tube model on the main dataset.
    Train(Common),
    /// Train and evaluate one model per history length and mode.
    Sweep(Common),
    /// Run one closed-loop episode.
    Run(Common),
    /// Run every configured tube variant over several seeds.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn execute(cmd: &Command) -> Result<i32> {
    match cmd {
        Command::Datagen(c) => {
            let cfg = c.load()?;
            for s in harness::cmd_datagen(&cfg)? {
                println!(
                    "{}: v_bar={} records={} failures={} q50={:.5} q90={:.5} q99={:.5} substeps/s={:.3e} hash={}",
                    s.name,
                    s.v_bar,
                    s.records,
                    s.failures,
                    s.q50,
                    s.q90,
                    s.q99,
                    s.substeps_per_second(),
                    s.hash
                );
            }
        }
        Command::Train(c) => {
            let cfg = c.load()?;
            let r = harness::cmd_train(&cfg)?;
            if let Some(last) = r.log.epochs.last() {
                println!("final epoch {} loss {:.5}", last.epoch, last.mean_loss);
            }
            println!(
                "holdout correctness={:.4} per_trajectory={:.4} mec={:.5} (reloaded correctness={:.4})",
                r.holdout.correctness, r.holdout.per_trajectory_correctness, r.holdout.mec, r.reloaded.correctness
            );
            println!("checkpoint: {}", cfg.model_dir().display());
        }
        Command::Sweep(c) => {
            let cfg = c.load()?;
            println!(
                "{:>4} {:>10} {:>12} {:>10}",
                "H", "mode", "correctness", "mec"
            );
            for r in harness::cmd_sweep(&cfg)? {
                println!(
                    "{:>4} {:>10} {:>12.4} {:>10.5}",
                    r.history,
                    r.mode.as_str(),
                    r.correctness,
                    r.mec
                );
            }
        }
        Command::Run(c) => {
            let cfg = c.load()?;
            let (_, s) = harness::cmd_run(&cfg)?;
            println!(
                "{} [{}] seed {}: {} after {} steps, min clearance {}, tube correctness {}, solve ms mean {:.1} p95 {:.1} max {:.1}",
                s.scenario,
                s.tube,
                s.seed,
                s.outcome.as_str(),
                s.steps,
                opt(s.min_clearance),
                opt(s.tube_correctness),
                s.mean_solve_ms,
                s.p95_solve_ms,
                s.max_solve_ms
            );
            if s.solver_dominated() {
                eprintln!("solver failed on {} of {} steps", s.failed_steps, s.steps);
                return Ok(harness::EXIT_SOLVER_DOMINATED);
            }
        }
        Command::Compare(c) => {
            let cfg = c.load()?;
            let r = harness::cmd_compare(&cfg)?;
            for s in &r.rows {
                println!(
                    "{:<12} seed {:>3}: {:<11} steps {:>5} clearance {}",
                    s.tube,
                    s.seed,
                    s.outcome.as_str(),
                    s.steps,
                    opt(s.min_clearance)
                );
            }
            println!(
                "dynamic / fixed_small completion ratio: {}",
                opt(r.completion_ratio)
            );
            if r.rows.iter().filter(|s| s.solver_dominated()).count() * 2 > r.rows.len() {
                return Ok(harness::EXIT_SOLVER_DOMINATED);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}

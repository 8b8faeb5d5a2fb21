use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use latent_its::harness::{self, ExperimentConfig, Overrides};
use latent_its::Error;

#[derive(Parser)]
#[command(name = "latent-its", version, about = "Inference-time scaling lab for latent reasoning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/test/dev prompt files.
    GenData(Common),
    /// Pretrain and freeze the backbone.
    Pretrain(Common),
    /// Train the Gaussian thought sampler (resumes unless --force).
    TrainSampler(Common),
    /// Evaluate strategies over budgets; writes metrics.csv and metrics.json.
    Evaluate(Common),
    /// Sampling-quality table at a single budget.
    Diagnose(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Strategy, repeatable or comma-separated (e.g. gaussian:1.0,gts).
    #[arg(long, value_delimiter = ',')]
    strategy: Vec<String>,
    /// Budget N, repeatable or comma-separated.
    #[arg(long, value_delimiter = ',')]
    budget: Vec<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    total_steps: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Number of training prompts (gen-data).
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    force: bool,
}

impl Common {
    fn resolve(&self) -> latent_its::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            strategies: self.strategy.clone(),
            budgets: self.budget.clone(),
            alpha: self.alpha,
            total_steps: self.total_steps,
            workers: self.workers,
            count: self.count,
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> latent_its::Result<()> {
    match cli.command {
        Command::GenData(c) => {
            let paths = harness::cmd_gen_data(&c.resolve()?, c.force)?;
            for p in paths {
                println!("{}", p.display());
            }
        }
        Command::Pretrain(c) => {
            let bb = harness::cmd_pretrain(&c.resolve()?, c.force)?;
            println!("test_accuracy {:.4}", bb.test_accuracy.unwrap_or(f64::NAN));
        }
        Command::TrainSampler(c) => {
            let r = harness::cmd_train_sampler(&c.resolve()?, c.force)?;
            println!("trained steps {}..{} (skipped {})", r.start_step, r.final_step, r.skipped);
        }
        Command::Evaluate(c) => {
            let cfg = c.resolve()?;
            harness::cmd_evaluate(&cfg)?;
            print!("{}", std::fs::read_to_string(cfg.out().join("metrics.csv"))?);
        }
        Command::Diagnose(c) => {
            let rows = harness::cmd_diagnose(&c.resolve()?)?;
            print!("{}", harness::format_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::UnsupportedStrategy(_) | Error::Exists(_) | Error::NotFound(_) => {
                    ExitCode::from(1)
                }
                _ => ExitCode::from(2),
            }
        }
    }
}

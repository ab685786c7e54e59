use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mismatch_lab::harness::{self, ExperimentConfig, RunOptions};
use mismatch_lab::oracle::{self, gradcheck, noise};

#[derive(Parser)]
#[command(name = "mismatch-lab", version, about = "Training-inference mismatch experiments and exact checks")]
struct Cli {
    /// Worker threads for rollouts and grid points (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Run a named experiment suite.
    Suite {
        name: String,
        #[arg(long)]
        out: PathBuf,
        /// Start from this configuration instead of the built-in one.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print the built-in base configuration as JSON.
    DefaultConfig,
    /// Check the horizon bound on the default grid.
    VerifyTheorem {
        #[arg(long, default_value = "runs/verify")]
        out: PathBuf,
    },
    /// Check both lemmas and sequence-level IS unbiasedness on the default grid.
    VerifyLemmas {
        #[arg(long, default_value = "runs/verify")]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
    /// Monte-Carlo check of the noisy-gradient decomposition.
    VerifyAppendixA {
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Analytic score function against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        triples: usize,
        #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn verdict(ok: bool) -> ExitCode {
    println!("{}", if ok { "PASS" } else { "FAIL" });
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    }
    let opts = RunOptions::default();
    match cli.command {
        Command::Train { config, out } => {
            let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            cfg.apply_env_overrides()?;
            let outcome = harness::train_with(&cfg, opts)?;
            harness::write_outputs(&out, &outcome)?;
            println!("{}", serde_json::to_string(&outcome.log.status)?);
            println!("{}", serde_json::to_string_pretty(&outcome.log.summary)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Suite { name, out, config } => {
            let mut base = match config {
                Some(p) => ExperimentConfig::load(&p).with_context(|| format!("loading {}", p.display()))?,
                None => harness::base_config(),
            };
            base.apply_env_overrides()?;
            let report = harness::run_suite_with(&name, &base, Some(&out), opts)?;
            for run in &report.runs {
                let s = &run.summary;
                println!(
                    "{:<16} {:<18} peak {:.3} final-mismatch {:.4} collapse {}",
                    run.label,
                    serde_json::to_string(&run.status)?,
                    s.peak_reward_ema,
                    s.final_mismatch,
                    s.collapse_step.map_or("-".to_string(), |c| c.to_string()),
                );
            }
            for (name, ok) in &report.checks {
                println!("{} {name}", if *ok { "ok  " } else { "FAIL" });
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::DefaultConfig => {
            println!("{}", serde_json::to_string_pretty(&harness::base_config())?);
            Ok(ExitCode::SUCCESS)
        }
        Command::VerifyTheorem { out } => {
            let reports = oracle::run_grid(&oracle::default_grid())?;
            oracle::write_grid_reports(&out, "theorem_grid", &reports)?;
            let violations: Vec<_> = reports.iter().filter(|r| !r.theorem.satisfied).collect();
            for r in &violations {
                eprintln!("violation at {:?}: lhs {:e} > rhs {:e}", r.point, r.theorem.lhs, r.theorem.rhs);
            }
            println!("{} grid points, {} violations", reports.len(), violations.len());
            Ok(verdict(violations.is_empty()))
        }
        Command::VerifyLemmas { out, tol } => {
            let reports = oracle::run_grid(&oracle::default_grid())?;
            oracle::write_grid_reports(&out, "lemma_grid", &reports)?;
            let worst_l1 = reports.iter().map(|r| r.lemma1_residual).fold(0.0, f64::max);
            let worst_seq = reports.iter().map(|r| r.seq_is_gap).fold(0.0, f64::max);
            let best_token = reports.iter().map(|r| r.token_is_gap).fold(0.0, f64::max);
            let l2 = reports.iter().all(|r| r.lemma2_holds && r.lemma2_delta.first() == Some(&0.0));
            println!("lemma 1: max residual {worst_l1:.3e}");
            println!("lemma 2: drift bound holds everywhere: {l2}");
            println!("sequence-level IS: max gap {worst_seq:.3e}; token-level IS: max gap {best_token:.3e}");
            Ok(verdict(worst_l1 <= tol && l2 && worst_seq <= tol && best_token > 1e-6))
        }
        Command::VerifyAppendixA { samples, seed } => {
            let report = noise::verify_appendix_a(&noise::default_model(), samples, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(verdict(report.passed))
        }
        Command::Gradcheck { triples, step, tol, seed } => {
            let report = gradcheck::run_gradcheck(triples, step, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(verdict(report.passed(tol)))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use oprlab::harness::{self, ExperimentConfig, RunRecord, OUTPUT_DIR_ENV};

#[derive(Parser)]
#[command(name = "oprlab", version, about = "On-policy replay experiments on tiny autoregressive policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Run this single seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Parent directory for run directories.
    #[arg(short, long, env = OUTPUT_DIR_ENV)]
    out: Option<PathBuf>,
    /// Worker threads for gradients, rollouts and evaluation.
    #[arg(short, long)]
    workers: Option<usize>,
    /// Replace an existing run directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured method on every seed.
    Run(Common),
    /// Replay methods across the configured budgets.
    Sweep(Common),
    /// Vanilla vs. top-score vs. bottom-score replay at one budget.
    Ablate(Common),
    /// Numerical checks on small tabular policies.
    Diag(Common),
    /// Tables and plot data from finished run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
}

fn load(c: &Common) -> Result<(ExperimentConfig, String, PathBuf)> {
    let (mut cfg, raw) = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(w) = c.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    let out = harness::resolve_output_dir(c.out.as_deref(), &cfg);
    Ok((cfg, raw, out))
}

fn print_record(record: &RunRecord) {
    for a in &record.aggregates {
        let bwt = a.bwt_mean.map_or("-".to_string(), |b| format!("{b:.2}"));
        println!("{:<24} seeds {}  ACC {:.2}  BWT {}", a.method, a.seeds, a.acc_mean, bwt);
    }
}

fn failures(record: &RunRecord) -> ExitCode {
    let failed = record.failed();
    for j in &failed {
        eprintln!("{} seed {} failed: {}", j.method, j.seed, j.error.as_deref().unwrap_or(""));
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run(c) => {
            let (cfg, raw, out) = load(&c)?;
            let (dir, record) = harness::cmd_run(cfg, &raw, &out, c.overwrite)?;
            print_record(&record);
            println!("wrote {}", dir.display());
            Ok(failures(&record))
        }
        Command::Sweep(c) => {
            let (cfg, raw, out) = load(&c)?;
            let (dir, report) = harness::cmd_sweep(cfg, &raw, &out, c.overwrite)?;
            for r in &report.rows {
                let bwt = r.bwt.map_or("-".to_string(), |b| format!("{b:.2}"));
                println!("{:<16} rho {:<5} ACC {:.2}  BWT {}", r.method, r.rho, r.acc, bwt);
            }
            println!("vanilla ACC monotone in rho: {:?}", report.vanilla_acc_monotone);
            println!("wrote {}", dir.display());
            Ok(failures(&RunRecord::read(&dir)?))
        }
        Command::Ablate(c) => {
            let (cfg, raw, out) = load(&c)?;
            let (dir, report) = harness::cmd_ablate(cfg, &raw, &out, c.overwrite)?;
            for r in &report.rows {
                let bwt = r.bwt.map_or("-".to_string(), |b| format!("{b:.2}"));
                println!("{:<11} rho {:<5} ACC {:.2}  BWT {}", r.variant, r.rho, r.acc, bwt);
            }
            println!("pools match: {}  top > bottom: {:?}", report.pools_match, report.top_beats_bottom_mean);
            println!("wrote {}", dir.display());
            Ok(failures(&RunRecord::read(&dir)?))
        }
        Command::Diag(c) => {
            let (cfg, raw, out) = load(&c)?;
            let (dir, s) = harness::cmd_diag(&cfg, &raw, &out, c.overwrite)?;
            println!("loss-bound identity: {} discrepancies over {} pools", s.loss_bound_discrepancies, s.loss_bound_pools);
            println!("gradient identity: max relative error {:.2e}", s.gradient_identity_max_rel_err);
            println!("one-step slopes (top): {:?}", s.top_slopes);
            println!("bound satisfied (top): {}  max power residual {:.1e}", s.top_bound_satisfied, s.max_power_residual);
            println!("bottom > top at largest step: {}/{}", s.bottom_exceeds_top, s.seeds);
            println!("wrote {}", dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { runs, out, overwrite } => {
            let s = harness::cmd_report(&runs, &out, overwrite).context("report")?;
            for a in &s.aggregates {
                let bwt = a.bwt_mean.map_or("-".to_string(), |b| format!("{b:.2}"));
                println!("{:<24} seeds {}  ACC {:.2}  BWT {}", a.method, a.seeds, a.acc_mean, bwt);
            }
            println!("wrote {} files to {}", s.files.len(), s.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

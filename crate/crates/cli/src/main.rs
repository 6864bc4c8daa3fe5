use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use source_cli::commands::{cmd_metrics, cmd_run, cmd_score, cmd_simulate, load_config, RunOptions};
use source_core::config::{Ablation, RunConfig};
use source_core::Result;

#[derive(Parser)]
#[command(name = "source", version, about = "Latent sources, root-proximity maps and symptom axes")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 is the reproducibility reference.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a simulated cohort directory.
    Simulate { out_dir: PathBuf },
    /// Fit all stages on a cohort and bootstrap the held-out metrics.
    Run {
        cohort_dir: PathBuf,
        out_dir: PathBuf,
        #[arg(long, value_parser = parse_ablation)]
        ablation: Option<Ablation>,
        /// Refit every stage inside each bootstrap resample.
        #[arg(long)]
        refit_all: bool,
    },
    /// Score a run's maps against the cohort's ground truth.
    Score { run_dir: PathBuf, cohort_dir: PathBuf },
    /// Recompute metrics from a run's saved artifacts.
    Metrics { run_dir: PathBuf, cohort_dir: PathBuf },
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    match s.parse::<Ablation>() {
        Ok(Ablation::None) | Err(_) => Err("expected one of no_rootmap, no_axis, both".into()),
        Ok(a) => Ok(a),
    }
}

fn config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = load_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = || config(cli.config.as_deref(), cli.seed);
    match cli.command {
        Command::Simulate { ref out_dir } => {
            let n = cmd_simulate(&cfg()?, out_dir)?;
            println!("wrote {n} subjects to {}", out_dir.display());
        }
        Command::Run {
            ref cohort_dir,
            ref out_dir,
            ablation,
            refit_all,
        } => {
            let opts = RunOptions {
                ablation: ablation.unwrap_or_default(),
                refit_all,
            };
            println!("{}", cmd_run(&cfg()?, cohort_dir, out_dir, opts)?);
        }
        Command::Score {
            ref run_dir,
            ref cohort_dir,
        } => {
            let report = cmd_score(run_dir, cohort_dir)?;
            for s in &report.sources {
                println!(
                    "source={} component={} abs_cor={} auc_zeta={} auc_eta={}",
                    s.source,
                    s.component.map_or("-".into(), |c| c.to_string()),
                    fmt_opt(s.abs_correlation),
                    fmt_opt(s.auc_zeta),
                    fmt_opt(s.auc_eta)
                );
            }
            println!(
                "mean auc_zeta={} auc_eta={}",
                fmt_opt(report.mean_auc_zeta),
                fmt_opt(report.mean_auc_eta)
            );
        }
        Command::Metrics {
            ref run_dir,
            ref cohort_dir,
        } => {
            let m = cmd_metrics(run_dir, cohort_dir)?;
            println!("{}", serde_json::to_string(&m)?);
        }
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

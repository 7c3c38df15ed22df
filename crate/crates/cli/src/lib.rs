//! Argument parsing and dispatch for the `mups` binary.
//!
//! Exit codes: 0 on success, 1 when a pipeline fails, 2 on a usage error
//! (unknown flag or subcommand, invalid flag combination).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use log::error;

use mups_core::eval::{trials_for_seconds, EvalReport};
use mups_core::experiment::{self, ExperimentConfig};
use mups_core::gradcheck::GradCheckConfig;
use mups_core::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "mups",
    version,
    about = "Meta-update transfer learning for cross-subject EEG-like data"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, training and adaptation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Reuse an output directory that belongs to a different experiment.
    #[arg(long, global = true)]
    force: bool,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Args, Debug, Default)]
struct BudgetArgs {
    /// Target trials used for adaptation.
    #[arg(long, conflicts_with = "budget_seconds")]
    budget: Option<usize>,
    /// Target recording time used for adaptation, converted to trials.
    #[arg(long)]
    budget_seconds: Option<f64>,
    /// Adaptation epochs.
    #[arg(long)]
    epochs: Option<u32>,
    /// Tune only the prediction head.
    #[arg(long)]
    freeze_rep: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic subject files and manifest.
    GenData,
    /// Pretrain the representation network on the pooled source subjects.
    Pretrain,
    /// Run episodic meta-training, checkpointing after every epoch.
    MetaTrain {
        /// Continue from the latest epoch checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Adapt the meta-trained model to the target subject.
    Adapt(BudgetArgs),
    /// Compare the meta model, its adaptation and a from-scratch baseline.
    Evaluate(BudgetArgs),
    /// Adapt at several target budgets and seeds.
    Sweep {
        /// Comma-separated ascending budgets in trials.
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
        /// Comma-separated adaptation seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        epochs: Option<u32>,
    },
    /// Compare analytic gradients of the full network with finite differences.
    GradCheck {
        /// Trials in the checked batch.
        #[arg(long, default_value_t = 4)]
        batch: usize,
        /// Check at most this many coordinates (a seeded sample beyond that).
        #[arg(long, default_value_t = usize::MAX)]
        max_coords: usize,
        /// Largest acceptable relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.global.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_target(false)
        .try_init();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => EXIT_USAGE,
                _ => EXIT_FAILURE,
            }
        }
    }
}

fn load_config(global: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if global.seed.is_some() {
        cfg.seed = global.seed;
    }
    if let Some(out) = &global.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn apply_budget(cfg: &mut ExperimentConfig, args: &BudgetArgs) -> Result<()> {
    if let Some(b) = args.budget {
        cfg.adaptation.budget = b;
    }
    if let Some(s) = args.budget_seconds {
        cfg.adaptation.budget =
            trials_for_seconds(s, cfg.synth.trial_seconds()).map_err(|e| Error::Usage(e.to_string()))?;
    }
    if let Some(e) = args.epochs {
        cfg.adaptation.epochs = e;
    }
    if args.freeze_rep {
        cfg.adaptation.freeze_rep = true;
    }
    Ok(())
}

fn print_report(label: &str, r: &EvalReport) {
    println!(
        "{label:<8} target acc {:.4} auc {:.4} | sources Avg. Acc {:.4} Avg. RA {:.4}",
        r.target.accuracy, r.target.auc, r.retention.avg_acc, r.retention.avg_ra
    );
}

fn dispatch(cli: Cli) -> Result<i32> {
    let mut cfg = load_config(&cli.global)?;
    match &cli.command {
        Command::Adapt(args) | Command::Evaluate(args) => apply_budget(&mut cfg, args)?,
        Command::Sweep { budgets, seeds, epochs } => {
            if let Some(b) = budgets {
                cfg.sweep.budgets = b.clone();
            }
            if let Some(s) = seeds {
                cfg.sweep.seeds = s.clone();
            }
            if let Some(e) = epochs {
                cfg.adaptation.epochs = *e;
            }
        }
        _ => {}
    }
    let cfg = cfg.resolved()?;

    if let Command::GradCheck {
        batch,
        max_coords,
        tolerance,
    } = cli.command
    {
        let gc = GradCheckConfig {
            max_coords,
            seed: cfg.training.seed,
            ..GradCheckConfig::default()
        };
        let started = std::time::Instant::now();
        let report = experiment::run_grad_check(&cfg, &gc, batch)?;
        println!(
            "max relative error {:.3e} over {} coordinates ({:.1} s)",
            report.max_relative_error,
            report.coords_checked,
            started.elapsed().as_secs_f64()
        );
        if let Some(w) = &report.worst {
            println!("worst coordinate: {w:?}");
        }
        return Ok(if report.max_relative_error <= tolerance as mups_core::Real {
            EXIT_OK
        } else {
            EXIT_FAILURE
        });
    }

    experiment::prepare_output(&cfg, cli.global.force)?;
    match cli.command {
        Command::GenData => {
            let dir = experiment::gen_data(&cfg)?;
            println!("wrote {} subjects to {}", cfg.synth.n_subjects, dir.display());
        }
        Command::Pretrain => {
            let s = experiment::run_pretrain(&cfg)?;
            let first = s.epoch_losses.first().copied().unwrap_or(f64::NAN as _);
            let last = s.epoch_losses.last().copied().unwrap_or(f64::NAN as _);
            println!(
                "pretrain loss {first:.4} -> {last:.4}; saved {}",
                s.checkpoint.display()
            );
        }
        Command::MetaTrain { resume } => {
            let s = experiment::run_meta_train(&cfg, resume)?;
            if let Some(e) = s.resumed_from {
                println!("resumed after epoch {e}");
            }
            if let Some(last) = s.epochs.last() {
                println!("final meta loss {:.4} (epoch {})", last.mean_meta_loss, last.epoch + 1);
            }
            println!("saved {}", s.checkpoint.display());
        }
        Command::Adapt(_) => print_report("adapted", &experiment::run_adapt(&cfg)?),
        Command::Evaluate(_) => {
            let c = experiment::run_evaluate(&cfg)?;
            print_report("meta", &c.meta);
            print_report("adapted", &c.adapted);
            print_report("scratch", &c.scratch);
        }
        Command::Sweep { .. } => {
            let s = experiment::run_sweep(&cfg)?;
            println!("budget  runs  target acc        Avg. Acc");
            for r in &s.rows {
                println!(
                    "{:>6}  {:>4}  {:.4} ± {:.4}  {:.4} ± {:.4}",
                    r.budget, r.runs, r.target_acc.mean, r.target_acc.std, r.avg_acc.mean, r.avg_acc.std
                );
            }
            println!("summary written to {}", s.summary.display());
        }
        Command::GradCheck { .. } => unreachable!("handled above"),
    }
    Ok(EXIT_OK)
}

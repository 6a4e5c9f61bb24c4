use std::path::PathBuf;
use std::process::ExitCode;

use cankd_core::AffinityKind;
use cankd_harness::checkpoint::{load_checkpoint, save_checkpoint};
use cankd_harness::config::Overrides;
use cankd_harness::error::exit_code;
use cankd_harness::runner::TEACHER_CHECKPOINT;
use cankd_harness::{prepare_context, run_ablation, run_experiment, ExperimentConfig, HarnessError, Split, Sweep};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cankd", version, about = "Can-block feature distillation on a toy segmentation task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a student (pretraining the teacher first if needed).
    Run(RunArgs),
    /// Pretrain the teacher only and write its checkpoint.
    Teacher(RunArgs),
    /// Run one ablation sweep: affinity, mu, pool_scale or residual.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        sweep: String,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Print the tensors stored in a checkpoint.
    Inspect { path: PathBuf },
    /// Print the default config as TOML.
    DefaultConfig,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config; defaults are used when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    affinity: Option<AffinityKind>,
    #[arg(long)]
    pool_scale: Option<usize>,
    #[arg(long)]
    residual: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    teacher_ckpt: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply(&Overrides {
            mu: self.mu,
            affinity: self.affinity,
            pool_scale: self.pool_scale,
            residual: self.residual,
            seed: self.seed,
            epochs: self.epochs,
            out_dir: self.out_dir.clone(),
            teacher_ckpt: self.teacher_ckpt.clone(),
        });
        Ok(cfg)
    }
}

fn execute(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::Run(args) => {
            let cfg = args.config()?;
            let outcome = run_experiment(&cfg)?;
            let last = outcome.final_row(Split::Val);
            println!(
                "{}: val pixel accuracy {:.4}, mean IoU {:.4}, feature loss {:.4}",
                outcome.out_dir.display(),
                last.pixel_accuracy,
                last.mean_iou,
                last.feat_loss
            );
        }
        Command::Teacher(args) => {
            let cfg = args.config()?;
            let resolved = cfg.validate()?;
            let ctx = prepare_context(&cfg, &resolved, &cfg.output.out_dir.join(TEACHER_CHECKPOINT))?;
            println!(
                "{}: teacher val pixel accuracy {:.4}, mean IoU {:.4}",
                ctx.teacher.checkpoint.display(),
                ctx.teacher.val_pixel_accuracy,
                ctx.teacher.val_mean_iou
            );
        }
        Command::Ablate { run, sweep, seeds } => {
            let cfg = run.config()?;
            let sweep = Sweep::by_name(&sweep).ok_or_else(|| {
                HarnessError::ConfigInvalid(format!("unknown sweep {sweep:?} (affinity, mu, pool_scale, residual)"))
            })?;
            let report = run_ablation(&cfg, &sweep, &seeds, &cfg.output.out_dir)?;
            print!("{report}");
        }
        Command::Inspect { path } => {
            let store = load_checkpoint(&path).map_err(|source| HarnessError::Checkpoint { path: path.clone(), source })?;
            for (name, t) in store.iter() {
                let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                println!("{name:<24} {:<14} l2 {norm:.6}", t.shape().to_string());
            }
            // Re-encoding must reproduce the file exactly.
            let tmp = std::env::temp_dir().join(format!("cankd-inspect-{}.ckpt", std::process::id()));
            save_checkpoint(&store, &tmp).map_err(|source| HarnessError::Checkpoint { path: tmp.clone(), source })?;
            let same = std::fs::read(&tmp).ok() == std::fs::read(&path).ok();
            let _ = std::fs::remove_file(&tmp);
            println!("{} tensors, {} values, round-trip {}", store.len(), store.numel(), if same { "exact" } else { "DIFFERS" });
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml_string()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::from(exit_code::SUCCESS as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

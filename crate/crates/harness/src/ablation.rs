//! Sweeps over one distillation setting with a shared teacher per seed.

use std::fmt;
use std::fs;
use std::path::Path;

use cankd_core::AffinityKind;
use log::{info, warn};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::metrics::Split;
use crate::runner::{prepare_context, run_student, SeedContext};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArmSetting {
    Affinity(AffinityKind),
    Mu(f64),
    PoolScale(usize),
    Residual(bool),
}

impl ArmSetting {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        match *self {
            ArmSetting::Affinity(a) => cfg.distill.affinity = a.into(),
            ArmSetting::Mu(mu) => cfg.distill.mu = mu,
            ArmSetting::PoolScale(s) => cfg.distill.pool_scale = s,
            ArmSetting::Residual(r) => cfg.distill.residual = r,
        }
    }

    /// Also used as the arm's directory name.
    pub fn label(&self) -> String {
        match self {
            ArmSetting::Affinity(a) => format!("affinity={a}"),
            ArmSetting::Mu(mu) => format!("mu={mu}"),
            ArmSetting::PoolScale(s) => format!("pool_scale={s}"),
            ArmSetting::Residual(r) => format!("residual={r}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub name: String,
    pub arms: Vec<ArmSetting>,
}

impl Sweep {
    pub fn affinity() -> Self {
        Sweep { name: "affinity".into(), arms: AffinityKind::ALL.iter().map(|&a| ArmSetting::Affinity(a)).collect() }
    }

    pub fn mu() -> Self {
        Sweep { name: "mu".into(), arms: [2.0, 5.0, 8.0, 10.0].into_iter().map(ArmSetting::Mu).collect() }
    }

    pub fn pool_scale() -> Self {
        Sweep { name: "pool_scale".into(), arms: [2, 4, 8].into_iter().map(ArmSetting::PoolScale).collect() }
    }

    pub fn residual() -> Self {
        Sweep { name: "residual".into(), arms: vec![ArmSetting::Residual(true), ArmSetting::Residual(false)] }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "affinity" => Some(Self::affinity()),
            "mu" => Some(Self::mu()),
            "pool_scale" | "pool" => Some(Self::pool_scale()),
            "residual" => Some(Self::residual()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    /// `None` when the run failed; see `error`.
    pub pixel_accuracy: Option<f64>,
    pub mean_iou: Option<f64>,
    pub feat_loss: Option<f64>,
    /// Validation feature loss per epoch.
    pub feat_loss_curve: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmReport {
    pub label: String,
    pub runs: Vec<SeedResult>,
    pub completed: usize,
    /// Means over completed seeds.
    pub mean_pixel_accuracy: Option<f64>,
    pub mean_mean_iou: Option<f64>,
    pub mean_feat_loss_curve: Vec<f64>,
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub sweep: String,
    pub seeds: Vec<u64>,
    pub teacher_pixel_accuracy: Vec<f64>,
    pub arms: Vec<ArmReport>,
    /// Highest mean validation pixel accuracy among arms that completed every seed.
    pub best_arm: Option<String>,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Runs every arm on every seed. A failing arm is recorded in the report and
/// the sweep carries on; only teacher preparation aborts it.
pub fn run_ablation(base: &ExperimentConfig, sweep: &Sweep, seeds: &[u64], out_dir: &Path) -> Result<AblationReport> {
    if sweep.arms.is_empty() || seeds.is_empty() {
        return Err(HarnessError::ConfigInvalid("a sweep needs at least one arm and one seed".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let mut contexts: Vec<SeedContext> = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = ExperimentConfig { seed, ..base.clone() };
        let resolved = cfg.validate()?;
        contexts.push(prepare_context(&cfg, &resolved, &out_dir.join(format!("teacher_seed{seed}.ckpt")))?);
    }
    let mut arms = Vec::with_capacity(sweep.arms.len());
    for arm in &sweep.arms {
        let label = arm.label();
        let mut runs = Vec::with_capacity(seeds.len());
        for (&seed, ctx) in seeds.iter().zip(&contexts) {
            let mut cfg = ExperimentConfig { seed, ..base.clone() };
            arm.apply(&mut cfg);
            cfg.output.out_dir = out_dir.join(&label).join(format!("seed{seed}"));
            info!("sweep {}: arm {label}, seed {seed}", sweep.name);
            let result = run_student(&cfg, ctx);
            runs.push(match result {
                Ok(outcome) => {
                    let last = outcome.final_row(Split::Val);
                    SeedResult {
                        seed,
                        pixel_accuracy: Some(last.pixel_accuracy),
                        mean_iou: Some(last.mean_iou),
                        feat_loss: Some(last.feat_loss),
                        feat_loss_curve: outcome
                            .rows
                            .iter()
                            .filter(|r| r.split == Split::Val)
                            .map(|r| r.feat_loss)
                            .collect(),
                        error: None,
                    }
                }
                Err(e) => {
                    warn!("arm {label}, seed {seed} failed: {e}");
                    SeedResult {
                        seed,
                        pixel_accuracy: None,
                        mean_iou: None,
                        feat_loss: None,
                        feat_loss_curve: Vec::new(),
                        error: Some(e.to_string()),
                    }
                }
            });
        }
        let ok: Vec<&SeedResult> = runs.iter().filter(|r| r.error.is_none()).collect();
        let epochs = ok.iter().map(|r| r.feat_loss_curve.len()).min().unwrap_or(0);
        let mean_feat_loss_curve =
            (0..epochs).map(|e| mean(ok.iter().map(|r| r.feat_loss_curve[e])).expect("non-empty")).collect();
        arms.push(ArmReport {
            label,
            completed: ok.len(),
            mean_pixel_accuracy: mean(ok.iter().filter_map(|r| r.pixel_accuracy)),
            mean_mean_iou: mean(ok.iter().filter_map(|r| r.mean_iou)),
            mean_feat_loss_curve,
            runs,
            best: false,
        });
    }
    let best = arms
        .iter()
        .enumerate()
        .filter(|(_, a)| a.completed == seeds.len())
        .filter_map(|(i, a)| a.mean_pixel_accuracy.map(|m| (i, m)))
        .fold(None, |best: Option<(usize, f64)>, (i, m)| match best {
            Some((_, bm)) if bm >= m => best,
            _ => Some((i, m)),
        });
    if let Some((i, _)) = best {
        arms[i].best = true;
    }
    let report = AblationReport {
        sweep: sweep.name.clone(),
        seeds: seeds.to_vec(),
        teacher_pixel_accuracy: contexts.iter().map(|c| c.teacher.val_pixel_accuracy).collect(),
        best_arm: best.map(|(i, _)| arms[i].label.clone()),
        arms,
    };
    write_report(&report, out_dir)?;
    Ok(report)
}

fn write_report(report: &AblationReport, dir: &Path) -> Result<()> {
    let json_path = dir.join(REPORT_JSON);
    let json = serde_json::to_string_pretty(report).expect("report serialises");
    fs::write(&json_path, json + "\n").map_err(|e| HarnessError::io(&json_path, e))?;

    let csv_path = dir.join(REPORT_CSV);
    let err = |e: csv::Error| HarnessError::Metrics { path: csv_path.clone(), message: e.to_string() };
    let mut w = csv::Writer::from_path(&csv_path).map_err(err)?;
    w.write_record(["arm", "seed", "pixel_accuracy", "mean_iou", "feat_loss", "error"]).map_err(err)?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for arm in &report.arms {
        for r in &arm.runs {
            w.write_record([
                arm.label.clone(),
                r.seed.to_string(),
                opt(r.pixel_accuracy),
                opt(r.mean_iou),
                opt(r.feat_loss),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(err)?;
        }
        w.write_record([arm.label.clone(), "mean".into(), opt(arm.mean_pixel_accuracy), opt(arm.mean_mean_iou), String::new(), String::new()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| HarnessError::io(&csv_path, e))
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sweep {} over seeds {:?}", self.sweep, self.seeds)?;
        writeln!(f, "{:<28} {:>6} {:>10} {:>10}  per-seed pixel accuracy", "arm", "done", "pix acc", "mIoU")?;
        let show = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        for arm in &self.arms {
            let per_seed: Vec<String> = arm.runs.iter().map(|r| show(r.pixel_accuracy)).collect();
            writeln!(
                f,
                "{:<28} {:>6} {:>10} {:>10}  {}{}",
                arm.label,
                format!("{}/{}", arm.completed, arm.runs.len()),
                show(arm.mean_pixel_accuracy),
                show(arm.mean_mean_iou),
                per_seed.join(" "),
                if arm.best { "  <- best" } else { "" }
            )?;
        }
        Ok(())
    }
}

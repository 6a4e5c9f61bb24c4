//! Teacher pretraining and student training runs.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cankd_core::distill::{enhance_student, total_loss};
use cankd_core::toy::{argmax_labels, task_loss, Confusion, SyntheticSample, ToyNetSpec};
use cankd_core::{
    CanBlockParams64, CanBlockWeights, ChannelAligner64, DistillConfig, Graph64, OptimizerState64, ParamStore64,
    SgdConfig, Tensor64, ToyNet64, Var,
};
use log::{debug, info};
use rand::seq::SliceRandom;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{ExperimentConfig, Resolved};
use crate::data::{stream_rng, Dataset, Stream};
use crate::error::{HarnessError, Result};
use crate::metrics::{write_summary, MetricsRow, MetricsWriter, Split};

pub const STUDENT_CHECKPOINT: &str = "student.ckpt";
pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
pub const TEACHER_METRICS: &str = "teacher_metrics.jsonl";
pub const CONFIG_COPY: &str = "config.toml";

/// A frozen teacher with its tap features for every sample of a dataset.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub net: ToyNet64,
    /// Where the weights were loaded from or saved to.
    pub checkpoint: PathBuf,
    /// Pretraining metrics; empty when loaded from disk.
    pub pretrain_rows: Vec<MetricsRow>,
    pub val_pixel_accuracy: f64,
    pub val_mean_iou: f64,
    /// `[sample][tap]`
    train_features: Vec<Vec<Tensor64>>,
    val_features: Vec<Vec<Tensor64>>,
}

impl Teacher {
    /// Tap features per training sample.
    pub fn train_features(&self) -> &[Vec<Tensor64>] {
        &self.train_features
    }

    pub fn val_features(&self) -> &[Vec<Tensor64>] {
        &self.val_features
    }
}

/// Everything a seed's runs share: the data and the teacher.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub dataset: Dataset,
    pub teacher: Teacher,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub student: ToyNet64,
    /// Aligner and Can block weights, `level{k}.` prefixed.
    pub distill_params: ParamStore64,
}

impl RunOutcome {
    pub fn final_row(&self, split: Split) -> &MetricsRow {
        self.rows.iter().rev().find(|r| r.split == split).expect("every run logs both splits")
    }
}

/// Loads the teacher named by the config or pretrains it, then caches its
/// features on the dataset.
pub fn prepare_context(cfg: &ExperimentConfig, resolved: &Resolved, default_ckpt: &Path) -> Result<SeedContext> {
    let dataset = Dataset::generate(cfg.seed, &cfg.dataset)?;
    let teacher = prepare_teacher(cfg, resolved, &dataset, default_ckpt)?;
    Ok(SeedContext { dataset, teacher })
}

fn prepare_teacher(cfg: &ExperimentConfig, resolved: &Resolved, dataset: &Dataset, default_ckpt: &Path) -> Result<Teacher> {
    let path = cfg.teacher.checkpoint.clone().unwrap_or_else(|| default_ckpt.to_path_buf());
    let (net, rows) = if path.exists() {
        info!("loading teacher from {}", path.display());
        let params = load_checkpoint(&path).map_err(|source| HarnessError::Checkpoint { path: path.clone(), source })?;
        let net = ToyNet64::from_params(resolved.teacher.clone(), params)
            .map_err(HarnessError::model(format!("teacher checkpoint {} does not match [teacher]", path.display())))?;
        (net, Vec::new())
    } else if cfg.teacher.pretrain {
        info!("pretraining teacher for {} epochs", cfg.teacher.pretrain_epochs);
        let (net, rows) = pretrain_teacher(cfg, resolved, dataset)?;
        save_checkpoint(&net.params, &path).map_err(|source| HarnessError::Checkpoint { path: path.clone(), source })?;
        if let Some(dir) = path.parent() {
            let mut w = MetricsWriter::create_named(dir, TEACHER_METRICS)?;
            w.write_epoch(&rows)?;
        }
        (net, rows)
    } else {
        return Err(HarnessError::CheckpointMissing(path));
    };
    let (train_features, _) = teacher_pass(&net, &dataset.train)?;
    let (val_features, confusion) = teacher_pass(&net, &dataset.val)?;
    Ok(Teacher {
        net,
        checkpoint: path,
        pretrain_rows: rows,
        val_pixel_accuracy: confusion.pixel_accuracy(),
        val_mean_iou: confusion.mean_iou(),
        train_features,
        val_features,
    })
}

fn teacher_pass(net: &ToyNet64, samples: &[SyntheticSample<f64>]) -> Result<(Vec<Vec<Tensor64>>, Confusion)> {
    let mut confusion = Confusion::new(net.spec.num_classes);
    let mut feats = Vec::with_capacity(samples.len());
    for s in samples {
        let mut g = Graph64::new();
        let vars = net.bind(&mut g, false);
        let image = g.constant(s.image.clone());
        let out = net.forward(&mut g, &vars, image).map_err(HarnessError::model("teacher forward"))?;
        confusion.add(&argmax_labels(g.value(out.logits), net.spec.num_classes), &s.labels);
        feats.push(out.features.iter().map(|&f| g.tensor(f).clone()).collect());
    }
    Ok((feats, confusion))
}

fn pretrain_teacher(cfg: &ExperimentConfig, resolved: &Resolved, dataset: &Dataset) -> Result<(ToyNet64, Vec<MetricsRow>)> {
    let seed = resolved.teacher_seed;
    let net = ToyNet64::init(resolved.teacher.clone(), &mut stream_rng(seed, Stream::TeacherInit))
        .map_err(HarnessError::model("teacher init"))?;
    let mut trainer = Trainer::new(net, None, &resolved.teacher_sgd, cfg.batch_size)?;
    let mut shuffle = stream_rng(seed, Stream::TeacherShuffle);
    let mut rows = Vec::new();
    for epoch in 1..=cfg.teacher.pretrain_epochs {
        let lr = trainer.learning_rate();
        let train = trainer.train_epoch(&dataset.train, None, epoch, &mut shuffle)?;
        let val = trainer.evaluate(&dataset.val, None)?;
        debug!("teacher epoch {epoch}: train loss {:.4}, val acc {:.4}", train.task, val.confusion.pixel_accuracy());
        rows.push(train.row(epoch, Split::Train, lr, 0.0));
        rows.push(val.row(epoch, Split::Val, lr, 0.0));
        trainer.end_epoch(epoch);
    }
    Ok((trainer.net, rows))
}

/// Full run: validate, prepare the teacher, train the student, write outputs.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let resolved = cfg.validate()?;
    let out_dir = &cfg.output.out_dir;
    fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let ctx = prepare_context(cfg, &resolved, &out_dir.join(TEACHER_CHECKPOINT))?;
    run_student(cfg, &ctx)
}

/// Trains the student of `cfg` against a prepared teacher and writes
/// `metrics.jsonl`, `summary.csv`, the checkpoint and a copy of the config
/// into `cfg.output.out_dir`. The config is validated here, so arms that
/// share a context each train with their own settings.
pub fn run_student(cfg: &ExperimentConfig, ctx: &SeedContext) -> Result<RunOutcome> {
    let resolved = &cfg.validate()?;
    if ctx.dataset.seed != cfg.seed || ctx.dataset.config != cfg.dataset {
        return Err(HarnessError::ConfigInvalid("seed context was built for a different seed or dataset".into()));
    }
    if ctx.teacher.net.spec != resolved.teacher {
        return Err(HarnessError::ConfigInvalid("seed context holds a different teacher layout".into()));
    }
    let out_dir = cfg.output.out_dir.clone();
    fs::create_dir_all(&out_dir).map_err(|e| HarnessError::io(&out_dir, e))?;
    let config_path = out_dir.join(CONFIG_COPY);
    fs::write(&config_path, cfg.to_toml_string()).map_err(|e| HarnessError::io(&config_path, e))?;

    let start = Instant::now();
    let seed = cfg.seed;
    let student = ToyNet64::init(resolved.student.clone(), &mut stream_rng(seed, Stream::StudentInit))
        .map_err(HarnessError::model("student init"))?;
    let distiller = Distiller::init(resolved, &ctx.teacher.net.spec, cfg.distill.enabled, seed)?;
    let mut trainer = Trainer::new(student, Some(distiller), &resolved.student_sgd, cfg.batch_size)?;
    let mut shuffle = stream_rng(seed, Stream::StudentShuffle);
    let mut writer = MetricsWriter::create(&out_dir)?;
    let mut rows = Vec::with_capacity(2 * cfg.epochs);
    let wall = |t: &Instant| if cfg.output.record_wall_time { t.elapsed().as_secs_f64() } else { 0.0 };
    for epoch in 1..=cfg.epochs {
        let lr = trainer.learning_rate();
        let train = trainer.train_epoch(&ctx.dataset.train, Some(&ctx.teacher.train_features), epoch, &mut shuffle)?;
        let train_row = train.row(epoch, Split::Train, lr, wall(&start));
        let val = trainer.evaluate(&ctx.dataset.val, Some(&ctx.teacher.val_features))?;
        let val_row = val.row(epoch, Split::Val, lr, wall(&start));
        info!(
            "epoch {epoch}: train total {:.4}, val acc {:.4}, val miou {:.4}, val feat {:.4}",
            train_row.total_loss, val_row.pixel_accuracy, val_row.mean_iou, val_row.feat_loss
        );
        writer.write_epoch(&[train_row.clone(), val_row.clone()])?;
        rows.push(train_row);
        rows.push(val_row);
        trainer.end_epoch(epoch);
    }
    let last: Vec<MetricsRow> = rows[rows.len() - 2..].to_vec();
    write_summary(&out_dir, &last)?;

    let distill_params = trainer.distiller.take().map(|d| d.params).unwrap_or_default();
    let mut all = ParamStore64::new();
    all.extend_prefixed("student", trainer.net.params.clone());
    all.extend_prefixed("distill", distill_params.clone());
    let ckpt = out_dir.join(STUDENT_CHECKPOINT);
    save_checkpoint(&all, &ckpt).map_err(|source| HarnessError::Checkpoint { path: ckpt, source })?;
    Ok(RunOutcome { out_dir, rows, student: trainer.net, distill_params })
}

/// Aligners and Can blocks, one per distilled level.
struct Distiller {
    config: DistillConfig,
    /// Whether the feature term enters the objective; it is always evaluated.
    enabled: bool,
    params: ParamStore64,
    /// Per level: does a channel aligner precede the Can block.
    aligned: Vec<bool>,
}

impl Distiller {
    fn init(resolved: &Resolved, teacher: &ToyNetSpec, enabled: bool, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, Stream::DistillInit);
        let config = resolved.distill.clone();
        let mut params = ParamStore64::new();
        let mut aligned = Vec::new();
        for (k, &level) in config.levels.iter().enumerate() {
            let cs = resolved.student.widths[resolved.student.taps[level]];
            let ct = teacher.widths[teacher.taps[level]];
            let context = format!("distill level {level}");
            if cs != ct {
                let a = ChannelAligner64::init(cs, ct, &mut rng).map_err(HarnessError::model(context.clone()))?;
                params.insert(format!("level{k}.align"), a.w_align);
            }
            aligned.push(cs != ct);
            let can = CanBlockParams64::init(ct, config.can, &mut rng).map_err(HarnessError::model(context))?;
            params.extend_prefixed(&format!("level{k}"), can.to_store());
        }
        Ok(Distiller { config, enabled, params, aligned })
    }

    /// Leaves in store order plus the per-level views onto them.
    fn bind(&self, g: &mut Graph64, trainable: bool) -> (Vec<Var>, Vec<(Option<Var>, CanBlockWeights<Var>)>) {
        let vars: Vec<Var> = self.params.iter().map(|(_, t)| g.leaf(t.clone(), trainable)).collect();
        let var = |name: String| self.params.index_of(&name).map(|i| vars[i]);
        let levels = (0..self.config.levels.len())
            .map(|k| {
                let weights = CanBlockWeights {
                    w_theta: var(format!("level{k}.w_theta")),
                    w_phi: var(format!("level{k}.w_phi")),
                    w_g: var(format!("level{k}.w_g")).expect("w_g is always stored"),
                    w_z: var(format!("level{k}.w_z")).expect("w_z is always stored"),
                };
                let align = if self.aligned[k] { var(format!("level{k}.align")) } else { None };
                (align, weights)
            })
            .collect();
        (vars, levels)
    }
}

#[derive(Default)]
struct SampleStats {
    task: f64,
    feat: f64,
    total: f64,
    objective: f64,
    predictions: Vec<usize>,
    grads: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
}

struct EpochStats {
    task: f64,
    feat: f64,
    total: f64,
    confusion: Confusion,
}

impl EpochStats {
    fn row(&self, epoch: usize, split: Split, learning_rate: f64, wall_seconds: f64) -> MetricsRow {
        MetricsRow {
            epoch,
            split,
            task_loss: self.task,
            feat_loss: self.feat,
            total_loss: self.total,
            pixel_accuracy: self.confusion.pixel_accuracy(),
            mean_iou: self.confusion.mean_iou(),
            learning_rate,
            wall_seconds,
        }
    }
}

struct Trainer {
    net: ToyNet64,
    distiller: Option<Distiller>,
    net_opt: OptimizerState64,
    distill_opt: OptimizerState64,
    batch_size: usize,
}

impl Trainer {
    fn new(net: ToyNet64, distiller: Option<Distiller>, sgd: &SgdConfig, batch_size: usize) -> Result<Self> {
        let opt = || OptimizerState64::new(sgd.clone()).map_err(HarnessError::model("[optimizer]"));
        Ok(Trainer { net, distiller, net_opt: opt()?, distill_opt: opt()?, batch_size })
    }

    fn learning_rate(&self) -> f64 {
        self.net_opt.learning_rate
    }

    fn end_epoch(&mut self, epoch: usize) {
        self.net_opt.end_epoch(epoch);
        self.distill_opt.end_epoch(epoch);
    }

    fn pass(&self, sample: &SyntheticSample<f64>, teacher: Option<&[Tensor64]>, train: bool) -> Result<SampleStats> {
        let mut g = Graph64::new();
        let net_vars = self.net.bind(&mut g, train);
        let image = g.constant(sample.image.clone());
        let out = self.net.forward(&mut g, &net_vars, image).map_err(HarnessError::model("student forward"))?;
        let task = task_loss(&mut g, out.logits, &sample.labels).map_err(HarnessError::model("task loss"))?;
        let mut stats = SampleStats { task: g.item(task), total: g.item(task), ..Default::default() };
        let mut objective = task;
        let mut distill_vars = Vec::new();
        if let (Some(d), Some(t)) = (&self.distiller, teacher) {
            let (vars, levels) = d.bind(&mut g, train);
            let mut pairs = Vec::with_capacity(levels.len());
            for (k, (align, weights)) in levels.iter().enumerate() {
                let level = d.config.levels[k];
                let f_t = g.constant(t[level].clone());
                let f_s = out.features[level];
                let f_s_star = enhance_student(&mut g, f_s, f_t, *align, &d.config.can, weights)
                    .map_err(HarnessError::model(format!("distill level {level}")))?;
                pairs.push((f_t, f_s_star));
            }
            let (total, breakdown) = total_loss(&mut g, task, &pairs, &d.config).map_err(HarnessError::model("total loss"))?;
            stats.feat = breakdown.feat_loss_total;
            if d.enabled {
                stats.total = breakdown.total;
                objective = total;
            }
            distill_vars = vars;
        }
        stats.objective = g.item(objective);
        stats.predictions = argmax_labels(g.value(out.logits), self.net.spec.num_classes);
        if train && stats.objective.is_finite() {
            g.backward(objective).map_err(HarnessError::model("backward"))?;
            let grads = |vars: &[Var]| vars.iter().map(|&v| g.grad_or_zeros(v)).collect::<Vec<_>>();
            stats.grads = Some((grads(&net_vars), grads(&distill_vars)));
        }
        Ok(stats)
    }

    fn train_epoch(
        &mut self,
        samples: &[SyntheticSample<f64>],
        teacher: Option<&[Vec<Tensor64>]>,
        epoch: usize,
        shuffle: &mut impl rand::Rng,
    ) -> Result<EpochStats> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(shuffle);
        let mut acc = EpochStats { task: 0.0, feat: 0.0, total: 0.0, confusion: Confusion::new(self.net.spec.num_classes) };
        let zeros = |s: &ParamStore64| s.iter().map(|(_, t)| vec![0.0; t.numel()]).collect::<Vec<_>>();
        for (step, batch) in order.chunks(self.batch_size).enumerate() {
            let mut net_grads = zeros(&self.net.params);
            let mut distill_grads = self.distiller.as_ref().map(|d| zeros(&d.params)).unwrap_or_default();
            for &i in batch {
                let s = self.pass(&samples[i], teacher.map(|t| t[i].as_slice()), true)?;
                if !s.objective.is_finite() {
                    return Err(HarnessError::NonFinite { what: "training loss", epoch, step: step + 1 });
                }
                acc.task += s.task;
                acc.feat += s.feat;
                acc.total += s.total;
                acc.confusion.add(&s.predictions, &samples[i].labels);
                let (gn, gd) = s.grads.expect("training pass returns gradients");
                add_into(&mut net_grads, &gn);
                add_into(&mut distill_grads, &gd);
            }
            let inv = 1.0 / batch.len() as f64;
            for g in net_grads.iter_mut().chain(distill_grads.iter_mut()).flatten() {
                *g *= inv;
            }
            self.net_opt.step(&mut self.net.params, &net_grads).map_err(HarnessError::model("optimizer"))?;
            if let Some(d) = &mut self.distiller {
                self.distill_opt.step(&mut d.params, &distill_grads).map_err(HarnessError::model("optimizer"))?;
            }
        }
        let n = samples.len() as f64;
        acc.task /= n;
        acc.feat /= n;
        acc.total /= n;
        Ok(acc)
    }

    fn evaluate(&self, samples: &[SyntheticSample<f64>], teacher: Option<&[Vec<Tensor64>]>) -> Result<EpochStats> {
        let mut acc = EpochStats { task: 0.0, feat: 0.0, total: 0.0, confusion: Confusion::new(self.net.spec.num_classes) };
        for (i, sample) in samples.iter().enumerate() {
            let s = self.pass(sample, teacher.map(|t| t[i].as_slice()), false)?;
            if !s.objective.is_finite() {
                return Err(HarnessError::NonFinite { what: "validation loss", epoch: 0, step: i + 1 });
            }
            acc.task += s.task;
            acc.feat += s.feat;
            acc.total += s.total;
            acc.confusion.add(&s.predictions, &sample.labels);
        }
        let n = samples.len() as f64;
        acc.task /= n;
        acc.feat /= n;
        acc.total /= n;
        Ok(acc)
    }
}

fn add_into(acc: &mut [Vec<f64>], g: &[Vec<f64>]) {
    for (a, g) in acc.iter_mut().zip(g) {
        for (a, g) in a.iter_mut().zip(g) {
            *a += g;
        }
    }
}

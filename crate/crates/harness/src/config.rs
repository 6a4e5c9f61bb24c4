//! Experiment configuration: a versioned TOML document plus CLI overrides.

use std::fs;
use std::path::{Path, PathBuf};

use cankd_core::toy::ToyNetSpec;
use cankd_core::{AffinityKind, CanBlockConfig, DistillConfig, InstanceNormConfig, PoolScale, SgdConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default = "NetSection::student")]
    pub student: NetSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub step_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            step_epochs: vec![16, 22],
            decay_factor: 0.1,
        }
    }
}

impl OptimizerSection {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            step_epochs: self.step_epochs.clone(),
            decay_factor: self.decay_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    /// `false` trains the student on the task loss alone. Feature losses are
    /// still evaluated and logged.
    pub enabled: bool,
    pub mu: f64,
    pub affinity: AffinitySetting,
    pub pool_scale: usize,
    pub residual: bool,
    /// Indices into the student (and teacher) tap lists.
    pub levels: Vec<usize>,
    pub embed_dim: Option<usize>,
    pub epsilon: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            enabled: true,
            mu: 5.0,
            affinity: AffinitySetting::DotProduct,
            pool_scale: 2,
            residual: true,
            levels: vec![0, 1],
            embed_dim: None,
            epsilon: 1e-5,
        }
    }
}

/// Serialised form of [`AffinityKind`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AffinitySetting {
    DotProduct,
    Gaussian,
    EmbeddedGaussian,
}

impl From<AffinitySetting> for AffinityKind {
    fn from(a: AffinitySetting) -> Self {
        match a {
            AffinitySetting::DotProduct => AffinityKind::DotProduct,
            AffinitySetting::Gaussian => AffinityKind::Gaussian,
            AffinitySetting::EmbeddedGaussian => AffinityKind::EmbeddedGaussian,
        }
    }
}

impl From<AffinityKind> for AffinitySetting {
    fn from(a: AffinityKind) -> Self {
        match a {
            AffinityKind::DotProduct => AffinitySetting::DotProduct,
            AffinityKind::Gaussian => AffinitySetting::Gaussian,
            AffinityKind::EmbeddedGaussian => AffinitySetting::EmbeddedGaussian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub widths: Vec<usize>,
    pub taps: Vec<usize>,
}

impl NetSection {
    fn student() -> Self {
        let s = ToyNetSpec::student_default();
        NetSection { widths: s.widths, taps: s.taps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub widths: Vec<usize>,
    pub taps: Vec<usize>,
    /// Train the teacher when no checkpoint is available.
    pub pretrain: bool,
    pub pretrain_epochs: usize,
    pub learning_rate: f64,
    pub step_epochs: Vec<usize>,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
    /// Loaded when present; written after pretraining otherwise.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let s = ToyNetSpec::teacher_default();
        TeacherSection {
            widths: s.widths,
            taps: s.taps,
            pretrain: true,
            pretrain_epochs: 30,
            learning_rate: 0.02,
            step_epochs: vec![20, 27],
            seed: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { height: 32, width: 32, num_classes: 4, train_size: 128, val_size: 96 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub out_dir: PathBuf,
    /// Off by default so metrics files depend on the config alone.
    pub record_wall_time: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { out_dir: PathBuf::from("runs/default"), record_wall_time: false }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            epochs: 24,
            batch_size: 8,
            optimizer: OptimizerSection::default(),
            distill: DistillSection::default(),
            teacher: TeacherSection::default(),
            student: NetSection::student(),
            dataset: DatasetSection::default(),
            output: OutputSection::default(),
        }
    }
}

/// Command-line overrides; `None` keeps the config value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub mu: Option<f64>,
    pub affinity: Option<AffinityKind>,
    pub pool_scale: Option<usize>,
    pub residual: Option<bool>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub teacher_ckpt: Option<PathBuf>,
}

/// Config values converted to core types; only produced by [`ExperimentConfig::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub teacher: ToyNetSpec,
    pub student: ToyNetSpec,
    pub distill: DistillConfig,
    pub student_sgd: SgdConfig,
    pub teacher_sgd: SgdConfig,
    pub teacher_seed: u64,
}

fn invalid(msg: impl Into<String>) -> HarnessError {
    HarnessError::ConfigInvalid(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml_str(&text)
            .map_err(|e| HarnessError::ConfigParse { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(mu) = o.mu {
            self.distill.mu = mu;
        }
        if let Some(a) = o.affinity {
            self.distill.affinity = a.into();
        }
        if let Some(s) = o.pool_scale {
            self.distill.pool_scale = s;
        }
        if let Some(r) = o.residual {
            self.distill.residual = r;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(e) = o.epochs {
            self.epochs = e;
        }
        if let Some(d) = &o.out_dir {
            self.output.out_dir = d.clone();
        }
        if let Some(c) = &o.teacher_ckpt {
            self.teacher.checkpoint = Some(c.clone());
        }
    }

    /// Checks every field that training depends on.
    pub fn validate(&self) -> Result<Resolved> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1"));
        }
        let d = &self.dataset;
        if d.height < 8 || d.width < 8 {
            return Err(invalid(format!("dataset must be at least 8x8, got {}x{}", d.height, d.width)));
        }
        if d.train_size == 0 || d.val_size == 0 {
            return Err(invalid("train_size and val_size must be >= 1"));
        }
        let model = |what: &str| HarnessError::model(format!("config {what}"));
        let teacher = ToyNetSpec::new(self.teacher.widths.clone(), d.num_classes, self.teacher.taps.clone())
            .map_err(model("[teacher]"))?;
        let student = ToyNetSpec::new(self.student.widths.clone(), d.num_classes, self.student.taps.clone())
            .map_err(model("[student]"))?;
        ToyNetSpec::check_teacher_student(&teacher, &student).map_err(model("[teacher] vs [student]"))?;

        let x = &self.distill;
        let pool_scale = PoolScale::new(x.pool_scale).map_err(model("distill.pool_scale"))?;
        if x.embed_dim == Some(0) {
            return Err(invalid("distill.embed_dim must be >= 1"));
        }
        let norm = InstanceNormConfig::new(x.epsilon).map_err(model("distill.epsilon"))?;
        let can = CanBlockConfig { affinity: x.affinity.into(), pool_scale, residual: x.residual, embed_dim: x.embed_dim };
        let distill = DistillConfig::new(x.mu, x.levels.clone(), norm, can).map_err(model("[distill]"))?;
        for &l in &x.levels {
            let (Some(&ts), Some(&ss)) = (teacher.taps.get(l), student.taps.get(l)) else {
                return Err(invalid(format!(
                    "distill level {l} is not a tap index of both nets (teacher taps {:?}, student taps {:?})",
                    teacher.taps, student.taps
                )));
            };
            let rt = teacher.stage_resolution(ts, d.height, d.width);
            let rs = student.stage_resolution(ss, d.height, d.width);
            if rt != rs {
                let source = cankd_core::Error::SpatialMismatch {
                    student_h: rs.0,
                    student_w: rs.1,
                    teacher_h: rt.0,
                    teacher_w: rt.1,
                };
                return Err(HarnessError::Model {
                    context: format!("distill level {l} pairs student stage {ss} with teacher stage {ts}"),
                    source,
                });
            }
        }
        if x.levels.iter().enumerate().any(|(i, l)| x.levels[..i].contains(l)) {
            return Err(invalid(format!("distill.levels has duplicates: {:?}", x.levels)));
        }

        let student_sgd = self.optimizer.sgd();
        student_sgd.validate().map_err(model("[optimizer]"))?;
        let t = &self.teacher;
        let teacher_sgd = SgdConfig { learning_rate: t.learning_rate, step_epochs: t.step_epochs.clone(), ..self.optimizer.sgd() };
        teacher_sgd.validate().map_err(model("[teacher]"))?;
        if t.pretrain && t.pretrain_epochs == 0 {
            return Err(invalid("teacher.pretrain_epochs must be >= 1"));
        }
        Ok(Resolved { teacher, student, distill, student_sgd, teacher_sgd, teacher_seed: t.seed.unwrap_or(self.seed) })
    }
}

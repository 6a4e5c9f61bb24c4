use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{shape_mismatch, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// No nonlinearity; makes the stages linear (used in tests).
    Identity,
}

/// Layout of a toy dense-prediction network.
///
/// Stage 0 runs at input resolution, stage 1 starts with a stride-2 max
/// pool, later stages keep that resolution. Each stage is a 3x3 convolution
/// with bias and activation. The head upsamples the last stage back to input
/// resolution and adds a 1x1 projection of the stage-0 features.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetSpec {
    pub widths: Vec<usize>,
    pub num_classes: usize,
    /// Stage indices whose outputs are exposed as distillation features.
    pub taps: Vec<usize>,
    pub activation: Activation,
}

impl ToyNetSpec {
    pub fn new(widths: Vec<usize>, num_classes: usize, taps: Vec<usize>) -> Result<Self> {
        let spec = ToyNetSpec { widths, num_classes, taps, activation: Activation::Relu };
        spec.validate()?;
        Ok(spec)
    }

    pub fn teacher_default() -> Self {
        ToyNetSpec { widths: vec![16, 32, 32], num_classes: 4, taps: vec![1, 2], activation: Activation::Relu }
    }

    pub fn student_default() -> Self {
        ToyNetSpec { widths: vec![8, 16, 16], num_classes: 4, taps: vec![1, 2], activation: Activation::Relu }
    }

    pub fn num_stages(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidConfig(format!("stage widths must be non-empty and positive: {:?}", self.widths)));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if let Some(&bad) = self.taps.iter().find(|&&t| t >= self.widths.len()) {
            return Err(Error::InvalidConfig(format!("tap {bad} is not a stage index (have {})", self.widths.len())));
        }
        Ok(())
    }

    /// Teacher must be at least as wide as the student at every stage.
    pub fn check_teacher_student(teacher: &ToyNetSpec, student: &ToyNetSpec) -> Result<()> {
        if teacher.num_stages() != student.num_stages() {
            return Err(Error::InvalidConfig("teacher and student need the same number of stages".into()));
        }
        if teacher.widths.iter().zip(&student.widths).any(|(t, s)| t < s) {
            return Err(Error::InvalidConfig(format!(
                "teacher widths {:?} must dominate student widths {:?}",
                teacher.widths, student.widths
            )));
        }
        if teacher.num_classes != student.num_classes {
            return Err(Error::InvalidConfig("teacher and student disagree on num_classes".into()));
        }
        Ok(())
    }

    /// Spatial downsampling factor of stages `>= 1`.
    pub fn downsample_factor(&self) -> usize {
        if self.num_stages() > 1 {
            2
        } else {
            1
        }
    }

    /// Resolution of the features produced by `stage` for an `h x w` input.
    pub fn stage_resolution(&self, stage: usize, h: usize, w: usize) -> (usize, usize) {
        if stage == 0 {
            (h, w)
        } else {
            (h.div_ceil(2), w.div_ceil(2))
        }
    }
}

/// A network: its layout plus named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet<T> {
    pub spec: ToyNetSpec,
    pub params: ParamStore<T>,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct NetOutput {
    /// `[K x H x W]`
    pub logits: Var,
    /// Output of every stage, after activation.
    pub stages: Vec<Var>,
    /// Stage outputs at the spec's tap indices, in tap order.
    pub features: Vec<Var>,
}

impl<T: Scalar> ToyNet<T> {
    /// He-uniform convolution weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: ToyNetSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut c_prev = INPUT_CHANNELS;
        for (i, &w) in spec.widths.iter().enumerate() {
            let bound = (6.0 / (9 * c_prev) as f64).sqrt();
            params.insert(format!("stage{i}.w"), Tensor::uniform(vec![w, c_prev, 3, 3], bound, rng)?);
            params.insert(format!("stage{i}.b"), Tensor::zeros(vec![w])?);
            c_prev = w;
        }
        let k = spec.num_classes;
        params.insert("head.w", Tensor::uniform(vec![k, c_prev], (1.0 / c_prev as f64).sqrt(), rng)?);
        if spec.num_stages() > 1 {
            let w0 = spec.widths[0];
            params.insert("head.skip", Tensor::uniform(vec![k, w0], (1.0 / w0 as f64).sqrt(), rng)?);
        }
        params.insert("head.b", Tensor::zeros(vec![k])?);
        Ok(ToyNet { spec, params })
    }

    /// Rebuilds a network from stored parameters, checking every expected
    /// entry is present with the right shape.
    pub fn from_params(spec: ToyNetSpec, params: ParamStore<T>) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let template = ToyNet::<T>::init(spec.clone(), &mut rng)?;
        if template.params.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} network tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (name, t) in template.params.iter() {
            let got = params.get(name)?;
            if got.dims() != t.dims() {
                return Err(Error::InvalidConfig(format!("{name}: expected shape {}, got {}", t.shape(), got.shape())));
            }
        }
        Ok(ToyNet { spec, params })
    }

    /// Inserts all parameters as leaves, in store order.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|(_, t)| g.leaf(t.clone(), trainable)).collect()
    }

    /// Forward pass on `image [3 x H x W]` with parameters bound by [`ToyNet::bind`].
    pub fn forward(&self, g: &mut Graph<T>, vars: &[Var], image: Var) -> Result<NetOutput> {
        if vars.len() != self.params.len() {
            return Err(shape_mismatch("toy_forward", format!("{} bound tensors for {}", vars.len(), self.params.len())));
        }
        let (c, h, w) = g
            .shape(image)
            .chw()
            .ok_or_else(|| shape_mismatch("toy_forward", format!("image must be 3 x H x W, got {}", g.shape(image))))?;
        if c != INPUT_CHANNELS {
            return Err(shape_mismatch("toy_forward", format!("image has {c} channels, expected {INPUT_CHANNELS}")));
        }
        let var = |name: &str| -> Result<Var> {
            self.params.index_of(name).map(|i| vars[i]).ok_or_else(|| Error::UnknownParam(name.to_string()))
        };
        let mut x = image;
        let mut stages = Vec::with_capacity(self.spec.num_stages());
        for i in 0..self.spec.num_stages() {
            if i == 1 {
                x = g.maxpool2d(x, 2)?;
            }
            let y = g.conv3x3(x, var(&format!("stage{i}.w"))?)?;
            let y = g.bias_add(y, var(&format!("stage{i}.b"))?)?;
            x = match self.spec.activation {
                Activation::Relu => g.relu(y),
                Activation::Identity => y,
            };
            stages.push(x);
        }
        let last = *stages.last().expect("at least one stage");
        let mut logits = if self.spec.num_stages() > 1 {
            let up = g.upsample_nearest(last, 2)?;
            let up = crop(g, up, h, w)?;
            let a = g.conv1x1(up, var("head.w")?)?;
            let b = g.conv1x1(stages[0], var("head.skip")?)?;
            g.add(a, b)?
        } else {
            g.conv1x1(last, var("head.w")?)?
        };
        logits = g.bias_add(logits, var("head.b")?)?;
        let features = self.spec.taps.iter().map(|&t| stages[t]).collect();
        Ok(NetOutput { logits, stages, features })
    }
}

/// Drops the bottom row / right column added when upsampling an odd-sized map.
fn crop<T: Scalar>(g: &mut Graph<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let (c, xh, xw) = g.shape(x).chw().expect("rank 3");
    if (xh, xw) == (h, w) {
        return Ok(x);
    }
    // Express the crop as a 0/1 selection matmul so it stays differentiable
    // without a dedicated op.
    let mut sel = vec![T::zero(); xh * xw * h * w];
    for y in 0..h {
        for xx in 0..w {
            sel[(y * xw + xx) * (h * w) + y * w + xx] = T::one();
        }
    }
    let sel = g.constant(Tensor::from_vec(vec![xh * xw, h * w], sel)?);
    let flat = g.reshape(x, &[c, xh * xw])?;
    let cropped = g.matmul(flat, sel)?;
    g.reshape(cropped, &[c, h, w])
}

/// Mean per-pixel cross-entropy of `logits [K x H x W]` against `labels`.
pub fn task_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

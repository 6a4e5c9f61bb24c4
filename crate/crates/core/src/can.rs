//! Cross-attention non-local (Can) block.
//!
//! Every student position `i` aggregates embedded teacher values over all
//! (pooled) teacher positions `j`:
//!
//! ```text
//! z_i  = prefactor * sum_j xi(x_i, y_j) * g(y_j)
//! F_S* = W_Z Z + F_S            (residual arm)
//! ```
//!
//! with `theta`, `phi`, `g` and `W_Z` implemented as bias-free 1x1
//! convolutions. The student map is the query side, the teacher map supplies
//! keys and values.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{shape_mismatch, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AffinityKind {
    /// `theta(x)^T phi(y)`, averaged over teacher positions.
    DotProduct,
    /// `exp(x^T y)` on raw features, normalised per row.
    Gaussian,
    /// `exp(theta(x)^T phi(y))`, normalised per row.
    EmbeddedGaussian,
}

impl AffinityKind {
    pub const ALL: [AffinityKind; 3] = [AffinityKind::DotProduct, AffinityKind::Gaussian, AffinityKind::EmbeddedGaussian];

    /// Whether `theta` / `phi` projections are part of this affinity.
    pub fn uses_embeddings(self) -> bool {
        !matches!(self, AffinityKind::Gaussian)
    }

    pub fn normalization(self) -> Normalization {
        match self {
            AffinityKind::DotProduct => Normalization::MeanOverPositions,
            AffinityKind::Gaussian | AffinityKind::EmbeddedGaussian => Normalization::RowSoftmax,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AffinityKind::DotProduct => "dot_product",
            AffinityKind::Gaussian => "gaussian",
            AffinityKind::EmbeddedGaussian => "embedded_gaussian",
        }
    }
}

impl fmt::Display for AffinityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AffinityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "dot_product" | "dot" => Ok(AffinityKind::DotProduct),
            "gaussian" => Ok(AffinityKind::Gaussian),
            "embedded_gaussian" => Ok(AffinityKind::EmbeddedGaussian),
            other => Err(Error::InvalidConfig(format!(
                "unknown affinity `{other}`; expected dot_product, gaussian or embedded_gaussian"
            ))),
        }
    }
}

/// How the raw affinity matrix is turned into aggregation weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Raw affinities; the aggregate is scaled by `1 / N_p`.
    MeanOverPositions,
    /// Rows already pass through softmax; prefactor is one.
    RowSoftmax,
}

/// Teacher-side max-pooling scale. `1` disables pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PoolScale(usize);

impl PoolScale {
    pub const NONE: PoolScale = PoolScale(1);

    pub fn new(s: usize) -> Result<Self> {
        match s {
            1 | 2 | 4 | 8 => Ok(PoolScale(s)),
            _ => Err(Error::InvalidScale(s)),
        }
    }

    pub fn get(self) -> usize {
        self.0
    }

    /// Number of pooled positions of an `h x w` map.
    pub fn pooled_positions(self, h: usize, w: usize) -> usize {
        h.div_ceil(self.0) * w.div_ceil(self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CanBlockConfig {
    pub affinity: AffinityKind,
    pub pool_scale: PoolScale,
    pub residual: bool,
    /// Width `D` of the theta/phi embedding; `None` means the channel count.
    pub embed_dim: Option<usize>,
}

impl Default for CanBlockConfig {
    fn default() -> Self {
        CanBlockConfig { affinity: AffinityKind::DotProduct, pool_scale: PoolScale::NONE, residual: true, embed_dim: None }
    }
}

/// The four projections of a Can block, generic over storage so the same
/// layout serves plain tensors and graph handles.
#[derive(Debug, Clone, PartialEq)]
pub struct CanBlockWeights<W> {
    /// `[D x C]`, absent for [`AffinityKind::Gaussian`].
    pub w_theta: Option<W>,
    /// `[D x C]`, absent for [`AffinityKind::Gaussian`].
    pub w_phi: Option<W>,
    /// `[C x C]`
    pub w_g: W,
    /// `[C x C]`
    pub w_z: W,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanBlockParams<T> {
    pub config: CanBlockConfig,
    pub weights: CanBlockWeights<Tensor<T>>,
}

impl<T: Scalar> CanBlockParams<T> {
    /// Validates weight shapes against the configuration.
    pub fn new(config: CanBlockConfig, weights: CanBlockWeights<Tensor<T>>) -> Result<Self> {
        let c = match weights.w_g.dims() {
            &[a, b] if a == b => a,
            d => return Err(Error::InvalidConfig(format!("w_g must be square C x C, got {d:?}"))),
        };
        if weights.w_z.dims() != [c, c] {
            return Err(Error::InvalidConfig(format!("w_z must be {c}x{c}, got {:?}", weights.w_z.dims())));
        }
        match (&weights.w_theta, &weights.w_phi, config.affinity.uses_embeddings()) {
            (Some(th), Some(ph), true) => {
                let d = th.dims()[0];
                if th.dims() != [d, c] || ph.dims() != [d, c] {
                    return Err(Error::InvalidConfig(format!(
                        "w_theta {:?} and w_phi {:?} must both be D x {c}",
                        th.dims(),
                        ph.dims()
                    )));
                }
                if config.embed_dim.is_some_and(|e| e != d) {
                    return Err(Error::InvalidConfig(format!("embedding width {d} disagrees with embed_dim")));
                }
            }
            (None, None, false) => {}
            (_, _, true) => {
                return Err(Error::InvalidConfig(format!("{} affinity needs w_theta and w_phi", config.affinity)))
            }
            (_, _, false) => return Err(Error::InvalidConfig("gaussian affinity takes no w_theta / w_phi".into())),
        }
        Ok(CanBlockParams { config, weights })
    }

    /// `theta`, `phi`, `g` uniform in `+-sqrt(1 / C)`; `W_Z` zero so the
    /// residual block starts as the identity.
    pub fn init<R: Rng + ?Sized>(channels: usize, config: CanBlockConfig, rng: &mut R) -> Result<Self> {
        let d = config.embed_dim.unwrap_or(channels);
        if d == 0 {
            return Err(Error::InvalidConfig("embed_dim must be >= 1".into()));
        }
        let bound = (1.0 / channels as f64).sqrt();
        let (w_theta, w_phi) = if config.affinity.uses_embeddings() {
            (Some(Tensor::uniform(vec![d, channels], bound, rng)?), Some(Tensor::uniform(vec![d, channels], bound, rng)?))
        } else {
            (None, None)
        };
        let w_g = Tensor::uniform(vec![channels, channels], bound, rng)?;
        let w_z = Tensor::zeros(vec![channels, channels])?;
        Self::new(config, CanBlockWeights { w_theta, w_phi, w_g, w_z })
    }

    pub fn channels(&self) -> usize {
        self.weights.w_g.dims()[0]
    }

    /// Inserts the weights into `g` as leaves.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> CanBlockWeights<Var> {
        let w = &self.weights;
        CanBlockWeights {
            w_theta: w.w_theta.clone().map(|t| g.leaf(t, trainable)),
            w_phi: w.w_phi.clone().map(|t| g.leaf(t, trainable)),
            w_g: g.leaf(w.w_g.clone(), trainable),
            w_z: g.leaf(w.w_z.clone(), trainable),
        }
    }

    /// Named tensors, in the order `w_theta, w_phi, w_g, w_z` (absent ones skipped).
    pub fn to_store(&self) -> ParamStore<T> {
        let w = &self.weights;
        let mut store = ParamStore::new();
        if let (Some(th), Some(ph)) = (&w.w_theta, &w.w_phi) {
            store.insert("w_theta", th.clone());
            store.insert("w_phi", ph.clone());
        }
        store.insert("w_g", w.w_g.clone());
        store.insert("w_z", w.w_z.clone());
        store
    }

    pub fn from_store(config: CanBlockConfig, store: &ParamStore<T>) -> Result<Self> {
        let opt = |n: &str| store.contains(n).then(|| store.get(n).cloned()).transpose();
        let weights = CanBlockWeights {
            w_theta: opt("w_theta")?,
            w_phi: opt("w_phi")?,
            w_g: store.get("w_g")?.clone(),
            w_z: store.get("w_z")?.clone(),
        };
        Self::new(config, weights)
    }
}

/// Trainable 1x1 projection from student to teacher channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAligner<T> {
    /// `[C_T x C_S]`
    pub w_align: Tensor<T>,
}

impl<T: Scalar> ChannelAligner<T> {
    pub fn new(w_align: Tensor<T>) -> Result<Self> {
        if w_align.shape().rank() != 2 {
            return Err(Error::InvalidConfig(format!("w_align must be C_T x C_S, got {}", w_align.shape())));
        }
        Ok(ChannelAligner { w_align })
    }

    pub fn init<R: Rng + ?Sized>(student_channels: usize, teacher_channels: usize, rng: &mut R) -> Result<Self> {
        let bound = (1.0 / student_channels as f64).sqrt();
        Self::new(Tensor::uniform(vec![teacher_channels, student_channels], bound, rng)?)
    }

    pub fn student_channels(&self) -> usize {
        self.w_align.dims()[1]
    }

    pub fn teacher_channels(&self) -> usize {
        self.w_align.dims()[0]
    }
}

/// Raw or normalised attention weights between student rows and teacher rows.
#[derive(Debug, Clone, Copy)]
pub struct Affinity {
    /// `[N_s x N_t]`
    pub matrix: Var,
    pub normalization: Normalization,
}

/// Affinity between student rows `x_emb [N_s x D]` and teacher rows
/// `y_emb [N_t x D]`. Softmax-based kinds are row-normalised here; the dot
/// product is left raw and averaged downstream.
pub fn affinity_matrix<T: Scalar>(g: &mut Graph<T>, x_emb: Var, y_emb: Var, kind: AffinityKind) -> Result<Affinity> {
    let (_, dx) = g.shape(x_emb).rows_cols().ok_or_else(|| shape_mismatch("affinity", "x_emb must be a matrix"))?;
    let (_, dy) = g.shape(y_emb).rows_cols().ok_or_else(|| shape_mismatch("affinity", "y_emb must be a matrix"))?;
    if dx != dy {
        return Err(match kind {
            AffinityKind::Gaussian => Error::GaussianChannelMismatch { student: dx, teacher: dy },
            _ => shape_mismatch("affinity", format!("embedding widths differ: {dx} vs {dy}")),
        });
    }
    let y_t = g.transpose2d(y_emb)?;
    let dots = g.matmul(x_emb, y_t)?;
    let matrix = match kind.normalization() {
        Normalization::MeanOverPositions => dots,
        Normalization::RowSoftmax => g.softmax_rows(dots)?,
    };
    Ok(Affinity { matrix, normalization: kind.normalization() })
}

/// Channels-by-positions view `[C x HW]` of a `[C x H x W]` map.
fn as_rows<T: Scalar>(g: &mut Graph<T>, f: Var) -> Result<Var> {
    let (c, h, w) = g.shape(f).chw().expect("checked rank 3");
    g.reshape(f, &[c, h * w])
}

fn pool<T: Scalar>(g: &mut Graph<T>, f: Var, scale: PoolScale) -> Result<Var> {
    match scale.get() {
        1 => Ok(f),
        s => g.maxpool2d(f, s),
    }
}

fn check_pair<T: Scalar>(g: &Graph<T>, f_s: Var, f_t: Var, kind: AffinityKind) -> Result<(usize, usize, usize)> {
    let chw = |v: Var, who: &str| {
        g.shape(v).chw().ok_or_else(|| shape_mismatch("can_operation", format!("{who} map must be C x H x W, got {}", g.shape(v))))
    };
    let (cs, hs, ws) = chw(f_s, "student")?;
    let (ct, ht, wt) = chw(f_t, "teacher")?;
    if (hs, ws) != (ht, wt) {
        return Err(Error::SpatialMismatch { student_h: hs, student_w: ws, teacher_h: ht, teacher_w: wt });
    }
    if cs != ct {
        return Err(match kind {
            AffinityKind::Gaussian => Error::GaussianChannelMismatch { student: cs, teacher: ct },
            _ => shape_mismatch("can_operation", format!("student has {cs} channels, teacher {ct}; align first")),
        });
    }
    Ok((cs, hs, ws))
}

/// The Can operation: returns `Z [C x H x W]` for student map `f_s` and
/// teacher map `f_t`.
///
/// `phi(F_T)` and `g(F_T)` are max-pooled after projection when the pool
/// scale exceeds one. The teacher map is not detached here.
pub fn can_operation<T: Scalar>(
    g: &mut Graph<T>,
    f_s: Var,
    f_t: Var,
    config: &CanBlockConfig,
    weights: &CanBlockWeights<Var>,
) -> Result<Var> {
    let (c, h, w) = check_pair(g, f_s, f_t, config.affinity)?;
    let (x_emb, y_emb) = match (config.affinity.uses_embeddings(), weights.w_theta, weights.w_phi) {
        (true, Some(w_theta), Some(w_phi)) => {
            let theta = g.conv1x1(f_s, w_theta)?;
            let phi = g.conv1x1(f_t, w_phi)?;
            (theta, pool(g, phi, config.pool_scale)?)
        }
        (false, None, None) => (f_s, pool(g, f_t, config.pool_scale)?),
        _ => return Err(Error::InvalidConfig(format!("weights do not match {} affinity", config.affinity))),
    };
    let x_rows = as_rows(g, x_emb)?;
    let x_rows = g.transpose2d(x_rows)?; // [N x D]
    let y_rows = as_rows(g, y_emb)?;
    let y_rows = g.transpose2d(y_rows)?; // [N_p x D]
    let n_pooled = g.shape(y_rows).dims()[0];

    let values = g.conv1x1(f_t, weights.w_g)?;
    let values = pool(g, values, config.pool_scale)?;
    let values = as_rows(g, values)?; // [C x N_p]

    let affinity = affinity_matrix(g, x_rows, y_rows, config.affinity)?;
    let att_t = g.transpose2d(affinity.matrix)?; // [N_p x N]
    let z = g.matmul(values, att_t)?; // [C x N]
    let z = match affinity.normalization {
        Normalization::MeanOverPositions => g.scale(z, T::one() / T::from_usize_lossy(n_pooled)),
        Normalization::RowSoftmax => z,
    };
    g.reshape(z, &[c, h, w])
}

/// Can block: `W_Z Z + F_S`, or `W_Z Z` alone when the residual is disabled.
pub fn can_block<T: Scalar>(
    g: &mut Graph<T>,
    f_s: Var,
    f_t: Var,
    config: &CanBlockConfig,
    weights: &CanBlockWeights<Var>,
) -> Result<Var> {
    let z = can_operation(g, f_s, f_t, config, weights)?;
    let projected = g.conv1x1(z, weights.w_z)?;
    if config.residual {
        g.add(projected, f_s)
    } else {
        Ok(projected)
    }
}

/// Maps `f_s [C_S x H x W]` to `[C_T x H x W]` with `w_align [C_T x C_S]`.
pub fn align_channels<T: Scalar>(g: &mut Graph<T>, f_s: Var, w_align: Var) -> Result<Var> {
    g.conv1x1(f_s, w_align)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(dims.to_vec(), data.to_vec()).unwrap()
    }

    fn identity_scalar_params(affinity: AffinityKind, residual: bool) -> CanBlockParams<f64> {
        let one = || t(&[1, 1], &[1.0]);
        let emb = affinity.uses_embeddings();
        let weights = CanBlockWeights {
            w_theta: emb.then(one),
            w_phi: emb.then(one),
            w_g: one(),
            w_z: one(),
        };
        let config = CanBlockConfig { affinity, pool_scale: PoolScale::NONE, residual, embed_dim: None };
        CanBlockParams::new(config, weights).unwrap()
    }

    #[test]
    fn hand_case_dot_product_single_pixel() {
        let p = identity_scalar_params(AffinityKind::DotProduct, true);
        let mut g = Graph::new();
        let w = p.bind(&mut g, false);
        let fs = g.constant(t(&[1, 1, 1], &[2.0]));
        let ft = g.constant(t(&[1, 1, 1], &[3.0]));
        let z = can_operation(&mut g, fs, ft, &p.config, &w).unwrap();
        assert_eq!(g.value(z), &[18.0]);
        let out = can_block(&mut g, fs, ft, &p.config, &w).unwrap();
        assert_eq!(g.value(out), &[20.0]);
    }

    #[test]
    fn affinity_hand_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1], &[2.0]));
        let y = g.constant(t(&[1, 1], &[3.0]));
        let a = affinity_matrix(&mut g, x, y, AffinityKind::DotProduct).unwrap();
        assert_eq!(g.value(a.matrix), &[6.0]);
        assert_eq!(a.normalization, Normalization::MeanOverPositions);

        let xz = g.constant(Tensor::zeros(vec![3, 2]).unwrap());
        let yz = g.constant(Tensor::zeros(vec![4, 2]).unwrap());
        let a = affinity_matrix(&mut g, xz, yz, AffinityKind::Gaussian).unwrap();
        assert_eq!(g.value(a.matrix), &[0.25; 12]);
        assert_eq!(a.normalization, Normalization::RowSoftmax);
    }

    #[test]
    fn affinity_width_mismatch_errors() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::zeros(vec![3, 2]).unwrap());
        let y = g.constant(Tensor::<f64>::zeros(vec![4, 3]).unwrap());
        assert_eq!(
            affinity_matrix(&mut g, x, y, AffinityKind::Gaussian).unwrap_err(),
            Error::GaussianChannelMismatch { student: 2, teacher: 3 }
        );
        assert!(matches!(
            affinity_matrix(&mut g, x, y, AffinityKind::DotProduct),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn spatial_mismatch_is_a_hard_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = CanBlockParams::<f64>::init(2, CanBlockConfig::default(), &mut rng).unwrap();
        let mut g = Graph::new();
        let w = p.bind(&mut g, false);
        let fs = g.constant(Tensor::zeros(vec![2, 4, 4]).unwrap());
        let ft = g.constant(Tensor::zeros(vec![2, 2, 4]).unwrap());
        assert_eq!(
            can_block(&mut g, fs, ft, &p.config, &w).unwrap_err(),
            Error::SpatialMismatch { student_h: 4, student_w: 4, teacher_h: 2, teacher_w: 4 }
        );
    }

    #[test]
    fn gaussian_channel_mismatch_is_reported() {
        let p = identity_scalar_params(AffinityKind::Gaussian, true);
        let mut g = Graph::new();
        let w = p.bind(&mut g, false);
        let fs = g.constant(Tensor::zeros(vec![1, 2, 2]).unwrap());
        let ft = g.constant(Tensor::zeros(vec![3, 2, 2]).unwrap());
        assert_eq!(
            can_operation(&mut g, fs, ft, &p.config, &w).unwrap_err(),
            Error::GaussianChannelMismatch { student: 1, teacher: 3 }
        );
    }

    #[test]
    fn params_validate_affinity_weight_presence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gaussian = CanBlockConfig { affinity: AffinityKind::Gaussian, ..Default::default() };
        let p = CanBlockParams::<f64>::init(3, gaussian, &mut rng).unwrap();
        assert!(p.weights.w_theta.is_none());
        let dot = CanBlockConfig { embed_dim: Some(2), ..Default::default() };
        assert!(CanBlockParams::new(dot, p.weights.clone()).is_err());
        let with_emb = CanBlockParams::<f64>::init(3, dot, &mut rng).unwrap();
        assert_eq!(with_emb.weights.w_theta.as_ref().unwrap().dims(), &[2, 3]);
        assert!(CanBlockParams::new(gaussian, with_emb.weights.clone()).is_err());
        assert!(with_emb.weights.w_z.data().iter().all(|&v| v == 0.0));
        let round = CanBlockParams::from_store(dot, &with_emb.to_store()).unwrap();
        assert_eq!(round, with_emb);
    }

    #[test]
    fn zero_output_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for residual in [true, false] {
            let cfg = CanBlockConfig { residual, pool_scale: PoolScale::new(2).unwrap(), ..Default::default() };
            let p = CanBlockParams::<f64>::init(2, cfg, &mut rng).unwrap();
            let mut g = Graph::new();
            let w = p.bind(&mut g, false);
            let fs_t = Tensor::uniform(vec![2, 3, 3], 1.0, &mut rng).unwrap();
            let fs = g.constant(fs_t.clone());
            let ft = g.constant(Tensor::uniform(vec![2, 3, 3], 1.0, &mut rng).unwrap());
            let out = can_block(&mut g, fs, ft, &p.config, &w).unwrap();
            if residual {
                assert_eq!(g.value(out), fs_t.data());
            } else {
                assert!(g.value(out).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn aligner_hand_case() {
        let al = ChannelAligner::new(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0])).unwrap();
        assert_eq!((al.student_channels(), al.teacher_channels()), (2, 3));
        let mut g = Graph::new();
        let w = g.constant(al.w_align.clone());
        let x = g.constant(Tensor::filled(vec![2, 2, 2], 1.0).unwrap());
        let y = align_channels(&mut g, x, w).unwrap();
        assert_eq!(g.value(y), &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let bad = g.constant(Tensor::filled(vec![3, 2, 2], 1.0).unwrap());
        assert!(matches!(align_channels(&mut g, bad, w), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn pool_scale_and_affinity_parse() {
        assert!(PoolScale::new(3).is_err());
        assert_eq!(PoolScale::new(4).unwrap().pooled_positions(6, 9), 2 * 3);
        for kind in AffinityKind::ALL {
            assert_eq!(kind.as_str().parse::<AffinityKind>().unwrap(), kind);
        }
        assert!("concat".parse::<AffinityKind>().is_err());
    }
}

//! Instance-normalised feature loss and the combined student objective
//! `L = L_task + mu * sum_levels L_feat`.

use crate::autograd::{Graph, Var};
use crate::can::{align_channels, can_block, CanBlockConfig, CanBlockWeights};
use crate::error::{shape_mismatch, Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceNormConfig {
    pub epsilon: f64,
}

impl InstanceNormConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("instance-norm epsilon must be > 0, got {epsilon}")));
        }
        Ok(InstanceNormConfig { epsilon })
    }
}

impl Default for InstanceNormConfig {
    fn default() -> Self {
        InstanceNormConfig { epsilon: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub mu: f64,
    /// Indices into the student's feature taps that are distilled.
    pub levels: Vec<usize>,
    pub norm: InstanceNormConfig,
    pub can: CanBlockConfig,
}

impl DistillConfig {
    pub fn new(mu: f64, levels: Vec<usize>, norm: InstanceNormConfig, can: CanBlockConfig) -> Result<Self> {
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(Error::InvalidConfig(format!("mu must be a finite value >= 0, got {mu}")));
        }
        if levels.is_empty() {
            return Err(Error::InvalidConfig("at least one distillation level is required".into()));
        }
        Ok(DistillConfig { mu, levels, norm, can })
    }
}

/// Scalar values of one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub feat_loss_per_level: Vec<f64>,
    pub feat_loss_total: f64,
    pub mu: f64,
    pub total: f64,
}

/// Per-channel standardisation over the `H x W` positions.
pub fn instance_norm<T: Scalar>(g: &mut Graph<T>, f: Var, cfg: &InstanceNormConfig) -> Result<Var> {
    g.instance_norm(f, T::lit(cfg.epsilon))
}

/// Mean squared difference of the instance-normalised maps. The teacher map
/// is detached; gradient only reaches `f_s_star`.
pub fn feature_loss<T: Scalar>(g: &mut Graph<T>, f_t: Var, f_s_star: Var, cfg: &InstanceNormConfig) -> Result<Var> {
    if g.shape(f_t) != g.shape(f_s_star) {
        return Err(shape_mismatch("feature_loss", format!("teacher {} vs student {}", g.shape(f_t), g.shape(f_s_star))));
    }
    let teacher = g.detach(f_t);
    let nt = instance_norm(g, teacher, cfg)?;
    let ns = instance_norm(g, f_s_star, cfg)?;
    let diff = g.sub(nt, ns)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

/// Enhanced student map `F_S*` for one level: optional channel alignment,
/// then the Can block against the teacher map.
pub fn enhance_student<T: Scalar>(
    g: &mut Graph<T>,
    f_s: Var,
    f_t: Var,
    aligner: Option<Var>,
    can: &CanBlockConfig,
    weights: &CanBlockWeights<Var>,
) -> Result<Var> {
    let aligned = match aligner {
        Some(w) => align_channels(g, f_s, w)?,
        None => f_s,
    };
    can_block(g, aligned, f_t, can, weights)
}

/// `task + mu * sum_l feature_loss(f_t[l], f_s_star[l])`.
///
/// `feats` holds `(teacher, enhanced student)` pairs, one per configured level.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    task: Var,
    feats: &[(Var, Var)],
    cfg: &DistillConfig,
) -> Result<(Var, LossBreakdown)> {
    if feats.len() != cfg.levels.len() {
        return Err(Error::InvalidConfig(format!(
            "{} feature pairs for {} distillation levels",
            feats.len(),
            cfg.levels.len()
        )));
    }
    let mut per_level = Vec::with_capacity(feats.len());
    let mut feat_total: Option<Var> = None;
    for &(f_t, f_s_star) in feats {
        let l = feature_loss(g, f_t, f_s_star, &cfg.norm)?;
        per_level.push(g.item(l).as_f64());
        feat_total = Some(match feat_total {
            Some(acc) => g.add(acc, l)?,
            None => l,
        });
    }
    let feat_total = feat_total.expect("levels non-empty");
    let weighted = g.scale(feat_total, T::lit(cfg.mu));
    let total = g.add(task, weighted)?;
    let breakdown = LossBreakdown {
        task_loss: g.item(task).as_f64(),
        feat_loss_per_level: per_level,
        feat_loss_total: g.item(feat_total).as_f64(),
        mu: cfg.mu,
        total: g.item(total).as_f64(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(dims.to_vec(), data.to_vec()).unwrap()
    }

    fn cfg(mu: f64, levels: usize) -> DistillConfig {
        DistillConfig::new(mu, (0..levels).collect(), InstanceNormConfig::default(), CanBlockConfig::default()).unwrap()
    }

    #[test]
    fn instance_norm_closed_form() {
        let mut g = Graph::new();
        let f = g.constant(t(&[1, 1, 2], &[1.0, 3.0]));
        let y = instance_norm(&mut g, f, &InstanceNormConfig::default()).unwrap();
        let e = (1.0f64 + 1e-5).powf(-0.5);
        let v = g.value(y);
        assert!((v[0] + e).abs() < 1e-15 && (v[1] - e).abs() < 1e-15);
        assert!((e - 0.999995).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(InstanceNormConfig::new(0.0).is_err());
        assert!(DistillConfig::new(-1.0, vec![0], InstanceNormConfig::default(), CanBlockConfig::default()).is_err());
        assert!(DistillConfig::new(1.0, vec![], InstanceNormConfig::default(), CanBlockConfig::default()).is_err());
    }

    #[test]
    fn feature_loss_identity_and_mismatch() {
        let mut g = Graph::new();
        let a = g.param(t(&[2, 1, 3], &[0.1, 0.5, -2.0, 3.0, 3.5, 1.0]));
        let l = feature_loss(&mut g, a, a, &InstanceNormConfig::default()).unwrap();
        assert_eq!(g.item(l), 0.0);
        let b = g.constant(Tensor::zeros(vec![2, 3, 1]).unwrap());
        assert!(matches!(feature_loss(&mut g, a, b, &InstanceNormConfig::default()), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn teacher_branch_receives_no_gradient() {
        let mut g = Graph::new();
        let ft = g.param(t(&[1, 1, 3], &[0.2, 1.0, -0.4]));
        let fs = g.param(t(&[1, 1, 3], &[1.0, 0.0, 0.5]));
        let l = feature_loss(&mut g, ft, fs, &InstanceNormConfig::default()).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(ft).is_none());
        assert!(g.grad(fs).unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::new();
        let task = g.constant(t(&[1], &[1.0]));
        let ft = g.constant(t(&[1, 1, 2], &[0.0, 1.0]));
        let fs = g.constant(t(&[1, 1, 2], &[1.0, 0.0]));
        let (total, bd) = total_loss(&mut g, task, &[(ft, fs)], &cfg(5.0, 1)).unwrap();
        // normalised maps are (-e, e) and (e, -e): mean squared diff = 4 e^2
        let e2 = 1.0 / (0.25 + 1e-5);
        let feat = 4.0 * 0.25 * e2;
        assert!((bd.feat_loss_total - feat).abs() < 1e-12);
        assert!((g.item(total) - (1.0 + 5.0 * feat)).abs() < 1e-12);
        assert_eq!(bd.total, g.item(total));

        let (total0, bd0) = total_loss(&mut g, task, &[(ft, fs)], &cfg(0.0, 1)).unwrap();
        assert_eq!(g.item(total0), 1.0);
        assert_eq!(bd0.task_loss, bd0.total);

        assert!(total_loss(&mut g, task, &[(ft, fs)], &cfg(1.0, 2)).is_err());
    }
}

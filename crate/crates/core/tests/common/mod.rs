#![allow(dead_code)]

use cankd_core::{AffinityKind, CanBlockParams, Tensor64};
use cankd_oracle::{Affinity, CanParams, FeatureMap, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor64 {
    Tensor64::uniform(dims.to_vec(), 1.0, rng).unwrap()
}

pub fn to_map(t: &Tensor64) -> FeatureMap {
    let (c, h, w) = t.shape().chw().expect("rank 3");
    FeatureMap::new(c, h, w, t.data().to_vec())
}

pub fn to_matrix(t: &Tensor64) -> Matrix {
    let (r, c) = t.shape().rows_cols().expect("rank 2");
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn to_oracle_params(p: &CanBlockParams<f64>) -> CanParams {
    let w = &p.weights;
    CanParams {
        w_theta: w.w_theta.as_ref().map(to_matrix),
        w_phi: w.w_phi.as_ref().map(to_matrix),
        w_g: to_matrix(&w.w_g),
        w_z: to_matrix(&w.w_z),
        affinity: match p.config.affinity {
            AffinityKind::DotProduct => Affinity::DotProduct,
            AffinityKind::Gaussian => Affinity::Gaussian,
            AffinityKind::EmbeddedGaussian => Affinity::EmbeddedGaussian,
        },
        pool: p.config.pool_scale.get(),
        residual: p.config.residual,
    }
}

/// Can block parameters with every weight random, including `W_Z` (which
/// `CanBlockParams::init` zeroes).
pub fn random_can_params(
    channels: usize,
    affinity: AffinityKind,
    pool: usize,
    residual: bool,
    rng: &mut ChaCha8Rng,
) -> CanBlockParams<f64> {
    use cankd_core::{CanBlockConfig, PoolScale};
    let config = CanBlockConfig { affinity, pool_scale: PoolScale::new(pool).unwrap(), residual, embed_dim: None };
    let mut p = CanBlockParams::init(channels, config, rng).unwrap();
    p.weights.w_z = random(&[channels, channels], rng);
    p
}

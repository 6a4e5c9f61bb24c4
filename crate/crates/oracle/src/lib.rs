//! Reference implementations written as explicit loops over plain `f64`
//! arrays. Nothing here is shared with the main crate; equivalence tests
//! compare the two.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major `channels x height x width`.
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "feature map size");
        FeatureMap { channels, height, width, data }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::new(channels, height, width, vec![0.0; channels * height * width])
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }
}

/// Row-major matrix given as a list of rows.
pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Affinity {
    DotProduct,
    Gaussian,
    EmbeddedGaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanParams {
    pub w_theta: Option<Matrix>,
    pub w_phi: Option<Matrix>,
    pub w_g: Matrix,
    pub w_z: Matrix,
    pub affinity: Affinity,
    /// 1 disables pooling.
    pub pool: usize,
    pub residual: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OracleError {
    SpatialMismatch,
    GaussianChannelMismatch,
    ShapeMismatch(&'static str),
    InvalidScale(usize),
}

impl fmt::Display for OracleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl std::error::Error for OracleError {}

/// Outcome of one equivalence comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub case_id: String,
    pub max_abs_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {}: max |dev| = {:.3e} (tol {:.0e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.case_id,
            self.max_abs_deviation,
            self.tolerance
        )
    }
}

/// Compares two equally long value lists. Differing lengths or NaN count as
/// an infinite deviation.
pub fn compare(case_id: impl Into<String>, expected: &[f64], actual: &[f64], tolerance: f64) -> OracleReport {
    let mut dev = if expected.len() == actual.len() { 0.0f64 } else { f64::INFINITY };
    for (a, b) in expected.iter().zip(actual) {
        let d = (a - b).abs();
        if d.is_nan() || d > dev {
            dev = if d.is_nan() { f64::INFINITY } else { d };
        }
    }
    OracleReport { case_id: case_id.into(), max_abs_deviation: dev, tolerance, pass: dev <= tolerance }
}

/// `out[o][y][x] = sum_c w[o][c] * f[c][y][x]`
pub fn oracle_conv1x1(f: &FeatureMap, w: &Matrix) -> Result<FeatureMap, OracleError> {
    let mut out = FeatureMap::zeros(w.len(), f.height, f.width);
    for (o, row) in w.iter().enumerate() {
        if row.len() != f.channels {
            return Err(OracleError::ShapeMismatch("conv1x1 weight width"));
        }
        for y in 0..f.height {
            for x in 0..f.width {
                let mut acc = 0.0;
                for (c, wv) in row.iter().enumerate() {
                    acc += wv * f.at(c, y, x);
                }
                out.set(o, y, x, acc);
            }
        }
    }
    Ok(out)
}

/// Non-overlapping `s x s` window maximum with ragged trailing windows.
pub fn oracle_maxpool(f: &FeatureMap, s: usize) -> Result<FeatureMap, OracleError> {
    if ![2, 4, 8].contains(&s) {
        return Err(OracleError::InvalidScale(s));
    }
    let ph = (f.height + s - 1) / s;
    let pw = (f.width + s - 1) / s;
    let mut out = FeatureMap::zeros(f.channels, ph, pw);
    for c in 0..f.channels {
        for py in 0..ph {
            for px in 0..pw {
                let mut best = f64::NEG_INFINITY;
                for y in py * s..(py * s + s).min(f.height) {
                    for x in px * s..(px * s + s).min(f.width) {
                        if f.at(c, y, x) > best {
                            best = f.at(c, y, x);
                        }
                    }
                }
                out.set(c, py, px, best);
            }
        }
    }
    Ok(out)
}

fn pooled(f: FeatureMap, s: usize) -> Result<FeatureMap, OracleError> {
    if s == 1 {
        Ok(f)
    } else {
        oracle_maxpool(&f, s)
    }
}

fn vector_at(f: &FeatureMap, pos: usize) -> Vec<f64> {
    let (y, x) = (pos / f.width, pos % f.width);
    (0..f.channels).map(|c| f.at(c, y, x)).collect()
}

/// Aggregation weights `w[i][j]` of the Can operation, prefactor included:
/// `xi / N_p` for the dot product, `exp(xi) / sum_j exp(xi)` for the Gaussian kinds.
pub fn oracle_attention(f_s: &FeatureMap, f_t: &FeatureMap, p: &CanParams) -> Result<Matrix, OracleError> {
    if (f_s.height, f_s.width) != (f_t.height, f_t.width) {
        return Err(OracleError::SpatialMismatch);
    }
    if f_s.channels != f_t.channels {
        return Err(match p.affinity {
            Affinity::Gaussian => OracleError::GaussianChannelMismatch,
            _ => OracleError::ShapeMismatch("student and teacher channels"),
        });
    }
    let (queries, keys) = match (p.affinity, &p.w_theta, &p.w_phi) {
        (Affinity::Gaussian, None, None) => (f_s.clone(), pooled(f_t.clone(), p.pool)?),
        (Affinity::DotProduct | Affinity::EmbeddedGaussian, Some(th), Some(ph)) => {
            (oracle_conv1x1(f_s, th)?, pooled(oracle_conv1x1(f_t, ph)?, p.pool)?)
        }
        _ => return Err(OracleError::ShapeMismatch("embedding weights do not match affinity")),
    };
    let n = queries.height * queries.width;
    let np = keys.height * keys.width;
    let mut weights = vec![vec![0.0; np]; n];
    for (i, row) in weights.iter_mut().enumerate() {
        let xi = vector_at(&queries, i);
        for (j, slot) in row.iter_mut().enumerate() {
            let yj = vector_at(&keys, j);
            let mut dot = 0.0;
            for d in 0..xi.len() {
                dot += xi[d] * yj[d];
            }
            *slot = dot;
        }
        match p.affinity {
            Affinity::DotProduct => {
                for v in row.iter_mut() {
                    *v /= np as f64;
                }
            }
            Affinity::Gaussian | Affinity::EmbeddedGaussian => {
                let mut max = f64::NEG_INFINITY;
                for &v in row.iter() {
                    if v > max {
                        max = v;
                    }
                }
                let mut denom = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    denom += *v;
                }
                for v in row.iter_mut() {
                    *v /= denom;
                }
            }
        }
    }
    Ok(weights)
}

/// The Can operation `Z`, looping over student positions `i`, pooled teacher
/// positions `j` and channels.
pub fn oracle_can_operation(f_s: &FeatureMap, f_t: &FeatureMap, p: &CanParams) -> Result<FeatureMap, OracleError> {
    let weights = oracle_attention(f_s, f_t, p)?;
    let values = pooled(oracle_conv1x1(f_t, &p.w_g)?, p.pool)?;
    let mut z = FeatureMap::zeros(values.channels, f_s.height, f_s.width);
    for i in 0..f_s.height * f_s.width {
        let (y, x) = (i / f_s.width, i % f_s.width);
        for c in 0..values.channels {
            let mut acc = 0.0;
            for (j, w) in weights[i].iter().enumerate() {
                acc += w * values.at(c, j / values.width, j % values.width);
            }
            z.set(c, y, x, acc);
        }
    }
    Ok(z)
}

/// Full Can block: `W_Z Z (+ F_S)`.
pub fn oracle_can(f_s: &FeatureMap, f_t: &FeatureMap, p: &CanParams) -> Result<FeatureMap, OracleError> {
    let z = oracle_can_operation(f_s, f_t, p)?;
    let mut out = oracle_conv1x1(&z, &p.w_z)?;
    if p.residual {
        if out.channels != f_s.channels {
            return Err(OracleError::ShapeMismatch("residual channels"));
        }
        for k in 0..out.data.len() {
            out.data[k] += f_s.data[k];
        }
    }
    Ok(out)
}

/// Two-pass per-channel standardisation (population variance).
pub fn oracle_instance_norm(f: &FeatureMap, eps: f64) -> FeatureMap {
    let mut out = FeatureMap::zeros(f.channels, f.height, f.width);
    let n = (f.height * f.width) as f64;
    for c in 0..f.channels {
        let mut mean = 0.0;
        for y in 0..f.height {
            for x in 0..f.width {
                mean += f.at(c, y, x);
            }
        }
        mean /= n;
        let mut var = 0.0;
        for y in 0..f.height {
            for x in 0..f.width {
                var += (f.at(c, y, x) - mean) * (f.at(c, y, x) - mean);
            }
        }
        var /= n;
        for y in 0..f.height {
            for x in 0..f.width {
                out.set(c, y, x, (f.at(c, y, x) - mean) / (var + eps).sqrt());
            }
        }
    }
    out
}

/// Mean over elements of the squared difference of the normalised maps.
pub fn oracle_feature_loss(f_t: &FeatureMap, f_s_star: &FeatureMap, eps: f64) -> Result<f64, OracleError> {
    if (f_t.channels, f_t.height, f_t.width) != (f_s_star.channels, f_s_star.height, f_s_star.width) {
        return Err(OracleError::ShapeMismatch("feature loss operands"));
    }
    let a = oracle_instance_norm(f_t, eps);
    let b = oracle_instance_norm(f_s_star, eps);
    let mut acc = 0.0;
    for k in 0..a.data.len() {
        acc += (a.data[k] - b.data[k]) * (a.data[k] - b.data[k]);
    }
    Ok(acc / a.data.len() as f64)
}

/// `task + mu * sum_levels feature_loss`.
pub fn oracle_total_loss(task: f64, levels: &[(FeatureMap, FeatureMap)], mu: f64, eps: f64) -> Result<f64, OracleError> {
    let mut feat = 0.0;
    for (t, s) in levels {
        feat += oracle_feature_loss(t, s, eps)?;
    }
    Ok(task + mu * feat)
}

/// Mean per-pixel cross-entropy of class-major logits `[K x H x W]`.
pub fn oracle_cross_entropy(logits: &FeatureMap, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for y in 0..logits.height {
        for x in 0..logits.width {
            let mut max = f64::NEG_INFINITY;
            for k in 0..logits.channels {
                max = max.max(logits.at(k, y, x));
            }
            let mut sum = 0.0;
            for k in 0..logits.channels {
                sum += (logits.at(k, y, x) - max).exp();
            }
            let label = labels[y * logits.width + x];
            total += max + sum.ln() - logits.at(label, y, x);
        }
    }
    total / (logits.height * logits.width) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(affinity: Affinity) -> CanParams {
        let one = vec![vec![1.0]];
        let emb = affinity != Affinity::Gaussian;
        CanParams {
            w_theta: emb.then(|| one.clone()),
            w_phi: emb.then(|| one.clone()),
            w_g: one.clone(),
            w_z: one,
            affinity,
            pool: 1,
            residual: false,
        }
    }

    #[test]
    fn hand_case_is_eighteen() {
        let fs = FeatureMap::new(1, 1, 1, vec![2.0]);
        let ft = FeatureMap::new(1, 1, 1, vec![3.0]);
        let z = oracle_can_operation(&fs, &ft, &scalar_params(Affinity::DotProduct)).unwrap();
        assert_eq!(z.data, vec![18.0]);
    }

    #[test]
    fn gaussian_rows_sum_to_one() {
        let fs = FeatureMap::new(2, 2, 3, (0..12).map(|i| (i as f64 * 0.7).sin()).collect());
        let ft = FeatureMap::new(2, 2, 3, (0..12).map(|i| (i as f64 * 1.3).cos()).collect());
        let mut p = scalar_params(Affinity::Gaussian);
        p.w_g = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        p.w_z = p.w_g.clone();
        let w = oracle_attention(&fs, &ft, &p).unwrap();
        for row in w {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_closed_forms() {
        let f = FeatureMap::new(2, 1, 2, vec![1.0, 3.0, 4.0, 4.0]);
        let n = oracle_instance_norm(&f, 1e-5);
        let e = (1.0f64 + 1e-5).powf(-0.5);
        assert!((n.data[0] + e).abs() < 1e-15 && (n.data[1] - e).abs() < 1e-15);
        assert_eq!(&n.data[2..], &[0.0, 0.0]);
    }

    #[test]
    fn losses_reduce_as_expected() {
        let f = FeatureMap::new(1, 2, 2, vec![0.3, -1.0, 2.0, 0.1]);
        assert_eq!(oracle_feature_loss(&f, &f, 1e-5).unwrap(), 0.0);
        assert_eq!(oracle_total_loss(0.7, &[(f.clone(), f.clone())], 5.0, 1e-5).unwrap(), 0.7);
        let g = FeatureMap::new(1, 2, 2, vec![1.0, 0.0, 0.0, 2.0]);
        assert_eq!(oracle_total_loss(0.7, &[(f, g)], 0.0, 1e-5).unwrap(), 0.7);
    }

    #[test]
    fn contract_errors() {
        let a = FeatureMap::zeros(1, 2, 2);
        let b = FeatureMap::zeros(1, 2, 3);
        let p = scalar_params(Affinity::DotProduct);
        assert_eq!(oracle_can(&a, &b, &p), Err(OracleError::SpatialMismatch));
        let c = FeatureMap::zeros(2, 2, 2);
        assert_eq!(oracle_can(&a, &c, &scalar_params(Affinity::Gaussian)), Err(OracleError::GaussianChannelMismatch));
        assert_eq!(oracle_maxpool(&a, 3), Err(OracleError::InvalidScale(3)));
    }

    #[test]
    fn compare_flags_length_and_nan() {
        assert!(compare("ok", &[1.0, 2.0], &[1.0, 2.0 + 1e-12], 1e-10).pass);
        assert!(!compare("len", &[1.0], &[1.0, 2.0], 1e-10).pass);
        assert!(!compare("nan", &[1.0], &[f64::NAN], 1e-10).pass);
    }
}

use super::kernels::{conv3x3_backward, conv3x3_forward, matmul_acc, matmul_at_acc, matmul_bt_acc, transpose};
use super::{accumulate, Graph, Op, Var};
use crate::error::{shape_mismatch, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Shape;

/// Pooling scales accepted by [`Graph::maxpool2d`].
pub const POOL_SCALES: [usize; 3] = [2, 4, 8];

impl<T: Scalar> Graph<T> {
    fn unary(&mut self, a: Var, shape: Shape, value: Vec<T>, op: Op<T>) -> Var {
        let rg = self.nodes[a.0].requires_grad;
        self.push(shape, value, rg, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_mismatch(op, format!("{sa} vs {sb}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).clone();
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(shape, value, rg, op))
    }

    fn chw(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        self.shape(v).chw().ok_or_else(|| shape_mismatch(op, format!("expected C x H x W, got {}", self.shape(v))))
    }

    fn rows_cols(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.shape(v)
            .rows_cols()
            .ok_or_else(|| shape_mismatch(op, format!("expected a matrix, got {}", self.shape(v))))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Scalar times tensor, the only broadcast the record supports.
    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let value = self.value(a).iter().map(|&x| x * k).collect();
        let shape = self.shape(a).clone();
        self.unary(a, shape, value, Op::Scale(a, k))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| x.exp()).collect();
        let shape = self.shape(a).clone();
        self.unary(a, shape, value, Op::Exp(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let shape = self.shape(a).clone();
        self.unary(a, shape, value, Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.unary(a, Shape::scalar(), vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let vals = self.value(a);
        let s: T = vals.iter().copied().sum();
        let m = s / T::from_usize_lossy(vals.len());
        self.unary(a, Shape::scalar(), vec![m], Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let shape = Shape::new(dims.to_vec())?;
        if shape.numel() != self.shape(a).numel() {
            return Err(shape_mismatch("reshape", format!("{} cannot become {shape}", self.shape(a))));
        }
        let value = self.value(a).to_vec();
        Ok(self.unary(a, shape, value, Op::Reshape(a)))
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rows_cols("transpose2d", a)?;
        let value = transpose(self.value(a), r, c);
        Ok(self.unary(a, Shape::new(vec![c, r])?, value, Op::Transpose(a)))
    }

    /// `[m x k] * [k x p] -> [m x p]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols("matmul", a)?;
        let (k2, p) = self.rows_cols("matmul", b)?;
        if k != k2 {
            return Err(shape_mismatch("matmul", format!("inner extents differ: {m}x{k} * {k2}x{p}")));
        }
        let mut value = vec![T::zero(); m * p];
        matmul_acc(self.value(a), self.value(b), &mut value, m, k, p);
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(Shape::new(vec![m, p])?, value, rg, Op::MatMul(a, b)))
    }

    /// Per-pixel linear map: `x [C_in x H x W]`, `w [C_out x C_in]`.
    pub fn conv1x1(&mut self, x: Var, w: Var) -> Result<Var> {
        let (c_in, h, wd) = self.chw("conv1x1", x)?;
        let (c_out, c_in_w) = self.rows_cols("conv1x1", w)?;
        if c_in != c_in_w {
            return Err(shape_mismatch("conv1x1", format!("input has {c_in} channels, weight expects {c_in_w}")));
        }
        let mut value = vec![T::zero(); c_out * h * wd];
        matmul_acc(self.value(w), self.value(x), &mut value, c_out, c_in, h * wd);
        let rg = self.any_requires_grad(&[x, w]);
        Ok(self.push(Shape::new(vec![c_out, h, wd])?, value, rg, Op::Conv1x1 { x, w }))
    }

    /// 3x3 convolution, stride 1, zero padding 1, no bias.
    /// `x [C_in x H x W]`, `w [C_out x C_in x 3 x 3]`.
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        let (c_in, h, wd) = self.chw("conv3x3", x)?;
        let (c_out, c_in_w, kh, kw) = match self.shape(w).dims() {
            &[a, b, c, d] => (a, b, c, d),
            _ => return Err(shape_mismatch("conv3x3", format!("weight must be rank 4, got {}", self.shape(w)))),
        };
        if c_in != c_in_w || kh != 3 || kw != 3 {
            return Err(shape_mismatch("conv3x3", format!("input {} vs weight {}", self.shape(x), self.shape(w))));
        }
        let mut value = vec![T::zero(); c_out * h * wd];
        conv3x3_forward(self.value(x), self.value(w), &mut value, c_in, c_out, h, wd);
        let rg = self.any_requires_grad(&[x, w]);
        Ok(self.push(Shape::new(vec![c_out, h, wd])?, value, rg, Op::Conv3x3 { x, w }))
    }

    /// Adds `b[c]` to every element of channel (row) `c` of a rank-2 or rank-3 `x`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.shape(x).dims()[0];
        if self.shape(x).rank() < 2 || self.shape(b).dims() != [c] {
            return Err(shape_mismatch("bias_add", format!("input {} vs bias {}", self.shape(x), self.shape(b))));
        }
        let plane = self.shape(x).numel() / c;
        let bias = self.value(b);
        let value = self.value(x).iter().enumerate().map(|(i, &v)| v + bias[i / plane]).collect();
        let shape = self.shape(x).clone();
        let rg = self.any_requires_grad(&[x, b]);
        Ok(self.push(shape, value, rg, Op::BiasAdd { x, b }))
    }

    /// Non-overlapping `s x s` max pooling with ceil-sized output; the last
    /// row/column of windows may be ragged. Ties resolve to the first element
    /// in row-major window order.
    pub fn maxpool2d(&mut self, x: Var, s: usize) -> Result<Var> {
        if !POOL_SCALES.contains(&s) {
            return Err(Error::InvalidScale(s));
        }
        let (c, h, w) = self.chw("maxpool2d", x)?;
        let (ph, pw) = (h.div_ceil(s), w.div_ceil(s));
        let src = self.value(x);
        let mut value = Vec::with_capacity(c * ph * pw);
        let mut argmax = Vec::with_capacity(c * ph * pw);
        for ch in 0..c {
            for py in 0..ph {
                for px in 0..pw {
                    let mut best = ch * h * w + (py * s) * w + px * s;
                    for y in py * s..((py + 1) * s).min(h) {
                        for xx in px * s..((px + 1) * s).min(w) {
                            let idx = ch * h * w + y * w + xx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                    }
                    value.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.unary(x, Shape::new(vec![c, ph, pw])?, value, Op::MaxPool { x, argmax }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::InvalidConfig("upsampling factor must be >= 1".into()));
        }
        let (c, h, w) = self.chw("upsample_nearest", x)?;
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x);
        let mut value = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                let row = &src[ch * h * w + (y / factor) * w..ch * h * w + (y / factor + 1) * w];
                value.extend((0..ow).map(|xx| row[xx / factor]));
            }
        }
        Ok(self.unary(x, Shape::new(vec![c, oh, ow])?, value, Op::Upsample { x, factor }))
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, p) = self.rows_cols("softmax_rows", x)?;
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(p) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        Ok(self.unary(x, Shape::new(vec![m, p])?, value, Op::SoftmaxRows(x)))
    }

    /// Per-channel standardisation over spatial positions (population
    /// variance, no affine parameters). Accepts `[C x H x W]` or `[C x N]`.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).clone();
        if shape.rank() < 2 {
            return Err(shape_mismatch("instance_norm", format!("need a channel axis, got {shape}")));
        }
        let c = shape.dims()[0];
        let n = shape.numel() / c;
        let nf = T::from_usize_lossy(n);
        let mut value = self.value(x).to_vec();
        let mut inv_std = Vec::with_capacity(c);
        for row in value.chunks_mut(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = (var + eps).sqrt().recip();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        Ok(self.unary(x, shape, value, Op::InstanceNorm { x, inv_std }))
    }

    /// Mean per-pixel cross-entropy of class-major `logits [K x H x W]`
    /// against `labels` (length `H * W`, values `< K`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (k, h, w) = self.chw("cross_entropy", logits)?;
        let n = h * w;
        if labels.len() != n {
            return Err(shape_mismatch("cross_entropy", format!("{} labels for {h}x{w} logits", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_mismatch("cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let z = self.value(logits);
        let mut probs = vec![T::zero(); k * n];
        let mut total = T::zero();
        for (px, &label) in labels.iter().enumerate() {
            let max = (0..k).map(|c| z[c * n + px]).fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for c in 0..k {
                let e = (z[c * n + px] - max).exp();
                probs[c * n + px] = e;
                sum += e;
            }
            for c in 0..k {
                probs[c * n + px] /= sum;
            }
            total += sum.ln() + max - z[label * n + px];
        }
        let loss = total / T::from_usize_lossy(n);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        Ok(self.unary(logits, Shape::scalar(), vec![loss], op))
    }

    /// Pushes the adjoint `d` of node `id` into its inputs' adjoint slots.
    pub(super) fn propagate(&self, id: usize, d: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        accumulate(adj, v, len(v), |s| s.iter_mut().zip(d).for_each(|(s, &g)| *s += g));
                    }
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(adj, a, len(a), |s| s.iter_mut().zip(d).for_each(|(s, &g)| *s += g));
                }
                if wants(b) {
                    accumulate(adj, b, len(b), |s| s.iter_mut().zip(d).for_each(|(s, &g)| *s -= g));
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let bv = self.value(b);
                    accumulate(adj, a, len(a), |s| {
                        s.iter_mut().zip(d).zip(bv).for_each(|((s, &g), &y)| *s += g * y)
                    });
                }
                if wants(b) {
                    let av = self.value(a);
                    accumulate(adj, b, len(b), |s| {
                        s.iter_mut().zip(d).zip(av).for_each(|((s, &g), &x)| *s += g * x)
                    });
                }
            }
            &Op::Scale(a, k) => {
                accumulate(adj, a, len(a), |s| s.iter_mut().zip(d).for_each(|(s, &g)| *s += g * k));
            }
            &Op::Exp(a) => {
                let y = &node.value;
                accumulate(adj, a, len(a), |s| s.iter_mut().zip(d).zip(y).for_each(|((s, &g), &y)| *s += g * y));
            }
            &Op::Relu(a) => {
                let x = self.value(a);
                accumulate(adj, a, len(a), |s| {
                    s.iter_mut().zip(d).zip(x).for_each(|((s, &g), &x)| {
                        if x > T::zero() {
                            *s += g
                        }
                    })
                });
            }
            &Op::Sum(a) => {
                accumulate(adj, a, len(a), |s| s.iter_mut().for_each(|s| *s += d[0]));
            }
            &Op::Mean(a) => {
                let g = d[0] / T::from_usize_lossy(len(a));
                accumulate(adj, a, len(a), |s| s.iter_mut().for_each(|s| *s += g));
            }
            &Op::Reshape(a) => {
                accumulate(adj, a, len(a), |s| s.iter_mut().zip(d).for_each(|(s, &g)| *s += g));
            }
            &Op::Transpose(a) => {
                let (r, c) = self.shape(a).rows_cols().expect("transpose input is a matrix");
                let dt = transpose(d, c, r);
                accumulate(adj, a, len(a), |s| s.iter_mut().zip(&dt).for_each(|(s, &g)| *s += g));
            }
            &Op::MatMul(a, b) => {
                let (m, k) = self.shape(a).rows_cols().expect("matmul lhs is a matrix");
                let p = node.shape.dims()[1];
                if wants(a) {
                    // dA = dZ * B^T
                    let bv = self.value(b);
                    accumulate(adj, a, len(a), |s| matmul_bt_acc(d, bv, s, m, p, k));
                }
                if wants(b) {
                    // dB = A^T * dZ
                    let av = self.value(a);
                    accumulate(adj, b, len(b), |s| matmul_at_acc(av, d, s, k, m, p));
                }
            }
            &Op::Conv1x1 { x, w } => {
                let (c_out, c_in) = self.shape(w).rows_cols().expect("conv1x1 weight is a matrix");
                let hw = len(x) / c_in;
                if wants(x) {
                    let wv = self.value(w);
                    accumulate(adj, x, len(x), |s| matmul_at_acc(wv, d, s, c_in, c_out, hw));
                }
                if wants(w) {
                    let xv = self.value(x);
                    accumulate(adj, w, len(w), |s| matmul_bt_acc(d, xv, s, c_out, hw, c_in));
                }
            }
            &Op::Conv3x3 { x, w } => {
                let (c_in, h, wd) = self.shape(x).chw().expect("conv3x3 input is rank 3");
                let c_out = self.shape(w).dims()[0];
                let mut dx = wants(x).then(|| vec![T::zero(); len(x)]);
                let mut dw = wants(w).then(|| vec![T::zero(); len(w)]);
                conv3x3_backward(
                    self.value(x),
                    self.value(w),
                    d,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    c_in,
                    c_out,
                    h,
                    wd,
                );
                if let Some(dx) = dx {
                    accumulate(adj, x, len(x), |s| s.iter_mut().zip(&dx).for_each(|(s, &g)| *s += g));
                }
                if let Some(dw) = dw {
                    accumulate(adj, w, len(w), |s| s.iter_mut().zip(&dw).for_each(|(s, &g)| *s += g));
                }
            }
            &Op::BiasAdd { x, b } => {
                if wants(x) {
                    accumulate(adj, x, len(x), |s| s.iter_mut().zip(d).for_each(|(s, &g)| *s += g));
                }
                if wants(b) {
                    let c = len(b);
                    let plane = d.len() / c;
                    accumulate(adj, b, c, |s| {
                        for (s, row) in s.iter_mut().zip(d.chunks(plane)) {
                            *s += row.iter().copied().sum::<T>();
                        }
                    });
                }
            }
            Op::MaxPool { x, argmax } => {
                accumulate(adj, *x, len(*x), |s| {
                    for (&src, &g) in argmax.iter().zip(d) {
                        s[src] += g;
                    }
                });
            }
            &Op::Upsample { x, factor } => {
                let (c, h, w) = self.shape(x).chw().expect("upsample input is rank 3");
                let (oh, ow) = (h * factor, w * factor);
                accumulate(adj, x, len(x), |s| {
                    for ch in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                s[ch * h * w + (y / factor) * w + xx / factor] += d[ch * oh * ow + y * ow + xx];
                            }
                        }
                    }
                });
            }
            &Op::SoftmaxRows(x) => {
                let p = node.shape.dims()[1];
                let y = &node.value;
                accumulate(adj, x, len(x), |s| {
                    for ((s, g), y) in s.chunks_mut(p).zip(d.chunks(p)).zip(y.chunks(p)) {
                        let dot: T = g.iter().zip(y).map(|(&g, &y)| g * y).sum();
                        for ((s, &g), &y) in s.iter_mut().zip(g).zip(y) {
                            *s += y * (g - dot);
                        }
                    }
                });
            }
            Op::InstanceNorm { x, inv_std } => {
                let c = inv_std.len();
                let n = len(*x) / c;
                let nf = T::from_usize_lossy(n);
                let y = &node.value;
                accumulate(adj, *x, len(*x), |s| {
                    for (((s, g), y), &is) in s.chunks_mut(n).zip(d.chunks(n)).zip(y.chunks(n)).zip(inv_std) {
                        let mean_g = g.iter().copied().sum::<T>() / nf;
                        let mean_gy = g.iter().zip(y).map(|(&g, &y)| g * y).sum::<T>() / nf;
                        for ((s, &g), &y) in s.iter_mut().zip(g).zip(y) {
                            *s += is * (g - mean_g - y * mean_gy);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let scale = d[0] / T::from_usize_lossy(n);
                accumulate(adj, *logits, len(*logits), |s| {
                    for (i, (s, &p)) in s.iter_mut().zip(probs).enumerate() {
                        let (class, px) = (i / n, i % n);
                        let target = if labels[px] == class { T::one() } else { T::zero() };
                        *s += scale * (p - target);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tensor;

    use super::*;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::eye(2).unwrap());
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c).dims(), &[1, 1]);
        assert_eq!(g.value(c), &[11.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros(vec![2, 3]).unwrap());
        let b = g.constant(Tensor::<f64>::zeros(vec![2, 3]).unwrap());
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { op: "matmul", .. })));
    }

    #[test]
    fn conv1x1_identity_and_scalar_weight() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 1, 2], &[1.0, -2.0, 3.0, 0.5]));
        let eye = g.constant(Tensor::eye(2).unwrap());
        let y = g.conv1x1(x, eye).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let ones = g.constant(Tensor::filled(vec![1, 2, 2], 1.0).unwrap());
        let two = g.constant(t(&[1, 1], &[2.0]));
        let y = g.conv1x1(ones, two).unwrap();
        assert_eq!(g.value(y), &[2.0; 4]);

        let bad = g.constant(Tensor::eye(3).unwrap());
        assert!(matches!(g.conv1x1(x, bad), Err(Error::ShapeMismatch { op: "conv1x1", .. })));
    }

    #[test]
    fn maxpool_basic_cases() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.maxpool2d(x, 2).unwrap();
        assert_eq!(g.value(p), &[4.0]);

        let c = g.constant(Tensor::filled(vec![2, 5, 3], 1.25).unwrap());
        let p = g.maxpool2d(c, 4).unwrap();
        assert_eq!(g.shape(p).dims(), &[2, 2, 1]);
        assert!(g.value(p).iter().all(|&v| v == 1.25));

        assert_eq!(g.maxpool2d(x, 3), Err(Error::InvalidScale(3)));
        assert_eq!(g.maxpool2d(x, 1), Err(Error::InvalidScale(1)));
    }

    #[test]
    fn maxpool_ties_route_gradient_to_first_occurrence() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 2, 2], &[5.0, 5.0, 5.0, 5.0]));
        let p = g.maxpool2d(x, 2).unwrap();
        let y = g.sum(p);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.0, 3f64.ln(), 7.0, 7.0]));
        let s = g.softmax_rows(x).unwrap();
        let v = g.value(s);
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);
        assert_eq!(&v[2..], &[0.5, 0.5]);

        let eq = g.constant(Tensor::filled(vec![1, 4], -3.0).unwrap());
        let s = g.softmax_rows(eq).unwrap();
        assert_eq!(g.value(s), &[0.25; 4]);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[1000.0, 1000.0, -1000.0]));
        let s = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(s), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn upsample_then_pool_recovers_input() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let u = g.upsample_nearest(x, 2).unwrap();
        assert_eq!(g.value(u), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]);
        let p = g.maxpool2d(u, 2).unwrap();
        assert_eq!(g.value(p), g.value(x));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::<f64>::zeros(vec![4, 2, 3]).unwrap());
        let l = g.cross_entropy(z, &[0, 1, 2, 3, 0, 1]).unwrap();
        assert!((g.item(l) - 4f64.ln()).abs() < 1e-15);
        assert!(g.cross_entropy(z, &[0, 1, 2, 3, 0, 4]).is_err());
        assert!(g.cross_entropy(z, &[0, 1]).is_err());
    }

    #[test]
    fn instance_norm_constant_channel_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 1, 2], &[3.0, 3.0, 1.0, 3.0]));
        let y = g.instance_norm(x, 1e-5).unwrap();
        let v = g.value(y);
        assert_eq!(&v[..2], &[0.0, 0.0]);
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((v[2] + expect).abs() < 1e-15 && (v[3] - expect).abs() < 1e-15);
    }

    #[test]
    fn elementwise_ops_reject_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros(vec![2, 3]).unwrap());
        let b = g.constant(Tensor::<f64>::zeros(vec![3, 2]).unwrap());
        assert!(g.add(a, b).is_err());
        assert!(g.sub(a, b).is_err());
        assert!(g.mul(a, b).is_err());
        assert!(g.reshape(a, &[4]).is_err());
    }

    #[test]
    fn reshape_transpose_round_trip_is_exact() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|i| (i as f64).sin() * 1e3 + 1.0 / 3.0).collect();
        let x = g.constant(t(&[3, 4], &data));
        let r = g.reshape(x, &[2, 6]).unwrap();
        let r = g.reshape(r, &[3, 4]).unwrap();
        let tr = g.transpose2d(r).unwrap();
        let back = g.transpose2d(tr).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(g.value(back)), bits(&data));
    }
}

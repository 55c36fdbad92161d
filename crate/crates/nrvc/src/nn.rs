//! Minimal trainable-layer substrate over ndarray: each layer owns its
//! parameters and implements an explicit backward pass. Everything is f32,
//! single-threaded and deterministic; loss reductions accumulate in f64.
//!
//! Sequences are (T, channels) matrices; single vectors ride along as (1, n).

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

/// One parameter tensor with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub v: Array2<f32>,
    pub g: Array2<f32>,
    pub(crate) m1: Array2<f32>,
    pub(crate) m2: Array2<f32>,
}

impl Param {
    pub fn new(v: Array2<f32>) -> Self {
        let g = Array2::zeros(v.raw_dim());
        let m1 = Array2::zeros(v.raw_dim());
        let m2 = Array2::zeros(v.raw_dim());
        Param { v, g, m1, m2 }
    }

    pub fn zeros(shape: (usize, usize)) -> Self {
        Param::new(Array2::zeros(shape))
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(0.0);
    }
}

/// Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn uniform_init(shape: (usize, usize), fan_in: usize, rng: &mut impl Rng) -> Array2<f32> {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    Array2::from_shape_simple_fn(shape, || rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

/// One Adam update with bias correction; `t` is the 1-based step count.
pub fn adam_step(p: &mut Param, cfg: &AdamConfig, t: u64) {
    let bc1 = 1.0 - f64::from(cfg.beta1).powi(t as i32);
    let bc2 = 1.0 - f64::from(cfg.beta2).powi(t as i32);
    let (bc1, bc2) = (bc1 as f32, bc2 as f32);
    Zip::from(&mut p.v)
        .and(&mut p.m1)
        .and(&mut p.m2)
        .and(&p.g)
        .for_each(|v, m1, m2, &g| {
            *m1 = cfg.beta1 * *m1 + (1.0 - cfg.beta1) * g;
            *m2 = cfg.beta2 * *m2 + (1.0 - cfg.beta2) * g * g;
            let mhat = *m1 / bc1;
            let shat = *m2 / bc2;
            *v -= cfg.lr * mhat / (shat.sqrt() + cfg.eps);
        });
}

// ---------------------------------------------------------------------------
// Gradient reversal

/// Forward pass of the gradient reversal layer: bitwise identity.
pub fn grl(x: &Array2<f32>, lambda: f32) -> Array2<f32> {
    debug_assert!(lambda >= 0.0);
    x.clone()
}

/// Backward pass: the downstream gradient scaled by -lambda.
pub fn grl_backward(gy: &Array2<f32>, lambda: f32) -> Array2<f32> {
    gy.mapv(|g| -lambda * g)
}

// ---------------------------------------------------------------------------
// Dense

#[derive(Debug, Clone)]
pub struct Dense {
    /// (out, in)
    pub w: Param,
    /// (1, out)
    pub b: Param,
}

impl Dense {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Dense {
            w: Param::new(uniform_init((out_dim, in_dim), in_dim, rng)),
            b: Param::zeros((1, out_dim)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.v.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.v.nrows()
    }

    /// x: (N, in) -> (N, out)
    pub fn forward(&self, x: &ArrayView2<f32>) -> Array2<f32> {
        x.dot(&self.w.v.t()) + &self.b.v
    }

    /// Accumulates parameter gradients and returns dL/dx.
    pub fn backward(&mut self, x: &ArrayView2<f32>, gy: &ArrayView2<f32>) -> Array2<f32> {
        self.w.g += &gy.t().dot(x);
        self.b.g += &gy.sum_axis(Axis(0)).insert_axis(Axis(0));
        gy.dot(&self.w.v)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

// ---------------------------------------------------------------------------
// 1-D convolution over time, stride 1, zero padding to preserve length

#[derive(Debug, Clone)]
pub struct Conv1d {
    /// (out, k * in), tap-major: weight for tap j, channel c sits at j*in + c.
    pub w: Param,
    /// (1, out)
    pub b: Param,
    pub k: usize,
    pub c_in: usize,
}

impl Conv1d {
    pub fn new(c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) -> Self {
        Conv1d {
            w: Param::new(uniform_init((c_out, k * c_in), k * c_in, rng)),
            b: Param::zeros((1, c_out)),
            k,
            c_in,
        }
    }

    pub fn c_out(&self) -> usize {
        self.w.v.nrows()
    }

    fn pad_left(&self) -> usize {
        (self.k - 1) / 2
    }

    /// Unrolled input patches, (T, k * in); zero beyond the edges.
    pub fn im2col(&self, x: &ArrayView2<f32>) -> Array2<f32> {
        let t_len = x.nrows();
        let pad = self.pad_left() as i64;
        let mut col = Array2::<f32>::zeros((t_len, self.k * self.c_in));
        for t in 0..t_len {
            for j in 0..self.k {
                let src = t as i64 + j as i64 - pad;
                if src < 0 || src >= t_len as i64 {
                    continue;
                }
                let src = src as usize;
                let base = j * self.c_in;
                for c in 0..self.c_in {
                    col[[t, base + c]] = x[[src, c]];
                }
            }
        }
        col
    }

    /// x: (T, in) -> (y: (T, out), col cache for backward).
    pub fn forward(&self, x: &ArrayView2<f32>) -> (Array2<f32>, Array2<f32>) {
        let col = self.im2col(x);
        let y = col.dot(&self.w.v.t()) + &self.b.v;
        (y, col)
    }

    /// Accumulates parameter gradients; returns dL/dx when requested.
    pub fn backward(
        &mut self,
        col: &Array2<f32>,
        gy: &ArrayView2<f32>,
        need_gx: bool,
    ) -> Option<Array2<f32>> {
        self.w.g += &gy.t().dot(col);
        self.b.g += &gy.sum_axis(Axis(0)).insert_axis(Axis(0));
        if !need_gx {
            return None;
        }
        let gcol = gy.dot(&self.w.v);
        let t_len = gy.nrows();
        let pad = self.pad_left() as i64;
        let mut gx = Array2::<f32>::zeros((t_len, self.c_in));
        for t in 0..t_len {
            for j in 0..self.k {
                let src = t as i64 + j as i64 - pad;
                if src < 0 || src >= t_len as i64 {
                    continue;
                }
                let src = src as usize;
                let base = j * self.c_in;
                for c in 0..self.c_in {
                    gx[[src, c]] += gcol[[t, base + c]];
                }
            }
        }
        Some(gx)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

// ---------------------------------------------------------------------------
// Instance normalization (per channel over time, no learned affine)

pub const INSTANCE_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
pub struct InCache {
    pub xhat: Array2<f32>,
    pub istd: Array1<f32>,
}

/// Normalizes each channel to zero mean / unit variance over the T axis.
pub fn instance_norm(x: &ArrayView2<f32>) -> (Array2<f32>, InCache) {
    let t_len = x.nrows() as f32;
    let mean = x.mean_axis(Axis(0)).expect("non-empty input");
    let mut var = Array1::<f32>::zeros(x.ncols());
    for (c, v) in var.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for t in 0..x.nrows() {
            let d = x[[t, c]] - mean[c];
            acc += d * d;
        }
        *v = acc / t_len;
    }
    let istd = var.mapv(|v| 1.0 / (v + INSTANCE_NORM_EPS).sqrt());
    let mut xhat = x.to_owned();
    for mut row in xhat.rows_mut() {
        Zip::from(&mut row).and(&mean).and(&istd).for_each(|h, &m, &is| *h = (*h - m) * is);
    }
    let cache = InCache { xhat: xhat.clone(), istd };
    (xhat, cache)
}

pub fn instance_norm_backward(cache: &InCache, gy: &ArrayView2<f32>) -> Array2<f32> {
    let t_len = gy.nrows() as f32;
    let gmean = gy.mean_axis(Axis(0)).expect("non-empty grad");
    let mut gproj = Array1::<f32>::zeros(gy.ncols());
    for (c, v) in gproj.iter_mut().enumerate() {
        let mut acc = 0.0f32;
        for t in 0..gy.nrows() {
            acc += gy[[t, c]] * cache.xhat[[t, c]];
        }
        *v = acc / t_len;
    }
    let mut gx = Array2::<f32>::zeros(gy.raw_dim());
    for t in 0..gy.nrows() {
        for c in 0..gy.ncols() {
            gx[[t, c]] =
                cache.istd[c] * (gy[[t, c]] - gmean[c] - cache.xhat[[t, c]] * gproj[c]);
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// Leaky ReLU

pub const LEAKY_SLOPE: f32 = 0.1;

pub fn leaky_relu(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Mask derived from the pre-activation input.
pub fn leaky_relu_backward(x: &Array2<f32>, gy: &ArrayView2<f32>) -> Array2<f32> {
    let mut gx = gy.to_owned();
    Zip::from(&mut gx).and(x).for_each(|g, &v| {
        if v <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    });
    gx
}

// ---------------------------------------------------------------------------
// Two-class softmax cross-entropy

/// Mean cross-entropy over rows plus the gradient of that mean w.r.t. logits.
pub fn softmax_ce(logits: &ArrayView2<f32>, labels: &[usize]) -> (f64, Array2<f32>) {
    assert_eq!(logits.nrows(), labels.len());
    assert_eq!(logits.ncols(), 2);
    let n = logits.nrows();
    let mut loss = 0.0f64;
    let mut grad = Array2::<f32>::zeros(logits.raw_dim());
    for (i, &label) in labels.iter().enumerate() {
        let (a, b) = (f64::from(logits[[i, 0]]), f64::from(logits[[i, 1]]));
        let m = a.max(b);
        let ea = (a - m).exp();
        let eb = (b - m).exp();
        let lse = m + (ea + eb).ln();
        loss += lse - if label == 0 { a } else { b };
        let p0 = ea / (ea + eb);
        let p1 = eb / (ea + eb);
        grad[[i, 0]] = ((p0 - if label == 0 { 1.0 } else { 0.0 }) / n as f64) as f32;
        grad[[i, 1]] = ((p1 - if label == 1 { 1.0 } else { 0.0 }) / n as f64) as f32;
    }
    (loss / n as f64, grad)
}

/// Fraction of rows whose argmax matches the label. Ties count as class 0.
pub fn argmax_accuracy(logits: &ArrayView2<f32>, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let pred = usize::from(logits[[i, 1]] > logits[[i, 0]]);
            pred == label
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    fn randn(shape: (usize, usize), label: &str) -> Array2<f32> {
        let mut rng = derive_rng(99, label);
        Array2::from_shape_simple_fn(shape, || rng.random_range(-1.0f32..1.0))
    }

    fn check_close(analytic: f32, numeric: f64, what: &str) {
        let diff = (f64::from(analytic) - numeric).abs();
        let scale = numeric.abs().max(f64::from(analytic.abs())).max(1.0);
        assert!(diff / scale < 2e-2, "{what}: analytic {analytic} vs fd {numeric}");
    }

    #[test]
    fn dense_backward_matches_fd() {
        let mut rng = derive_rng(1, "dense");
        let mut layer = Dense::new(5, 4, &mut rng);
        let x = randn((6, 5), "dense-x");
        let probe = randn((6, 4), "dense-probe");
        let loss = |l: &Dense, x: &Array2<f32>| -> f64 {
            l.forward(&x.view()).iter().zip(probe.iter()).map(|(&y, &p)| f64::from(y * p)).sum()
        };
        let gx = layer.backward(&x.view(), &probe.view());
        let mut x_mut = x.clone();
        for idx in [(0, 0), (3, 2), (5, 4)] {
            let analytic = gx[idx];
            let l = &layer;
            let numeric = {
                let orig = x_mut[idx];
                x_mut[idx] = orig + 1e-2;
                let up = loss(l, &x_mut);
                x_mut[idx] = orig - 1e-2;
                let down = loss(l, &x_mut);
                x_mut[idx] = orig;
                (up - down) / 2e-2
            };
            check_close(analytic, numeric, "dense gx");
        }
        for idx in [(0, 0), (2, 4)] {
            let analytic = layer.w.g[idx];
            let mut shadow = layer.clone();
            let orig = shadow.w.v[idx];
            shadow.w.v[idx] = orig + 1e-2;
            let up = loss(&shadow, &x);
            shadow.w.v[idx] = orig - 1e-2;
            let down = loss(&shadow, &x);
            check_close(analytic, (up - down) / 2e-2, "dense gw");
        }
    }

    #[test]
    fn conv_backward_matches_fd() {
        for k in [1usize, 3, 4, 8] {
            let mut rng = derive_rng(2, "conv");
            let mut layer = Conv1d::new(3, 4, k, &mut rng);
            let x = randn((7, 3), "conv-x");
            let probe = randn((7, 4), "conv-probe");
            let loss = |l: &Conv1d, x: &Array2<f32>| -> f64 {
                l.forward(&x.view()).0.iter().zip(probe.iter()).map(|(&y, &p)| f64::from(y * p)).sum()
            };
            let (_, col) = layer.forward(&x.view());
            let gx = layer.backward(&col, &probe.view(), true).unwrap();
            let mut x_mut = x.clone();
            for idx in [(0, 0), (3, 1), (6, 2)] {
                let analytic = gx[idx];
                let orig = x_mut[idx];
                x_mut[idx] = orig + 1e-2;
                let up = loss(&layer, &x_mut);
                x_mut[idx] = orig - 1e-2;
                let down = loss(&layer, &x_mut);
                x_mut[idx] = orig;
                check_close(analytic, (up - down) / 2e-2, &format!("conv k={k} gx"));
            }
            let analytic = layer.w.g[[1, layer.w.v.ncols() - 1]];
            let mut shadow = layer.clone();
            let idx = (1, shadow.w.v.ncols() - 1);
            let numeric = {
                let orig = shadow.w.v[idx];
                shadow.w.v[idx] = orig + 1e-2;
                let up = loss(&shadow, &x);
                shadow.w.v[idx] = orig - 1e-2;
                let down = loss(&shadow, &x);
                shadow.w.v[idx] = orig;
                (up - down) / 2e-2
            };
            check_close(analytic, numeric, &format!("conv k={k} gw"));
        }
    }

    #[test]
    fn conv_preserves_length() {
        let mut rng = derive_rng(3, "convlen");
        for k in 1..=8 {
            let layer = Conv1d::new(2, 3, k, &mut rng);
            for t in [1usize, 2, 9] {
                let x = randn((t, 2), "len-x");
                let (y, _) = layer.forward(&x.view());
                assert_eq!(y.dim(), (t, 3));
            }
        }
    }

    #[test]
    fn instance_norm_stats_and_backward() {
        let x = randn((40, 6), "in-x") * 3.0 + 1.5;
        let (y, cache) = instance_norm(&x.view());
        for c in 0..6 {
            let col: Vec<f32> = (0..40).map(|t| y[[t, c]]).collect();
            let mean: f32 = col.iter().sum::<f32>() / 40.0;
            let var: f32 = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / 40.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
        // Backward vs finite differences through a nonlinear probe.
        let probe = randn((40, 6), "in-probe");
        let loss = |x: &Array2<f32>| -> f64 {
            let (y, _) = instance_norm(&x.view());
            y.iter().zip(probe.iter()).map(|(&y, &p)| f64::from(y * p)).sum()
        };
        let gy = probe.clone();
        let gx = instance_norm_backward(&cache, &gy.view());
        let mut x_mut = x.clone();
        for idx in [(0, 0), (17, 3), (39, 5)] {
            let orig = x_mut[idx];
            x_mut[idx] = orig + 1e-2;
            let up = loss(&x_mut);
            x_mut[idx] = orig - 1e-2;
            let down = loss(&x_mut);
            x_mut[idx] = orig;
            check_close(gx[idx], (up - down) / 2e-2, "instance norm gx");
        }
    }

    #[test]
    fn grl_forward_is_identity_backward_scales() {
        let x = randn((4, 4), "grl");
        for lambda in [0.0f32, 0.1, 1.0] {
            let y = grl(&x, lambda);
            assert_eq!(x, y);
            let g = randn((4, 4), "grl-g");
            let back = grl_backward(&g.view().to_owned(), lambda);
            for (b, gv) in back.iter().zip(g.iter()) {
                assert_eq!(*b, -lambda * gv);
            }
        }
    }

    #[test]
    fn softmax_ce_values_and_grad() {
        let logits = ndarray::arr2(&[[0.0f32, 0.0]]);
        let (loss, grad) = softmax_ce(&logits.view(), &[0]);
        assert_abs_diff_eq!(loss, std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(grad[[0, 0]], -0.5, epsilon = 1e-6);
        assert_abs_diff_eq!(grad[[0, 1]], 0.5, epsilon = 1e-6);

        let logits = ndarray::arr2(&[[20.0f32, -20.0]]);
        let (loss, _) = softmax_ce(&logits.view(), &[0]);
        assert!(loss < 1e-8);

        // Gradient vs finite difference on a soft case.
        let logits = ndarray::arr2(&[[0.7f32, -0.2], [0.1, 0.4]]);
        let labels = [1usize, 0];
        let (_, grad) = softmax_ce(&logits.view(), &labels);
        let mut shadow = logits.clone();
        for idx in [(0, 0), (1, 1)] {
            let orig = shadow[idx];
            shadow[idx] = orig + 1e-3;
            let up = softmax_ce(&shadow.view(), &labels).0;
            shadow[idx] = orig - 1e-3;
            let down = softmax_ce(&shadow.view(), &labels).0;
            shadow[idx] = orig;
            check_close(grad[idx], (up - down) / 2e-3, "ce grad");
        }
    }

    #[test]
    fn adam_zero_lr_keeps_params() {
        let mut rng = derive_rng(4, "adam");
        let mut p = Param::new(uniform_init((3, 3), 3, &mut rng));
        p.g.fill(0.5);
        let before = p.v.clone();
        adam_step(&mut p, &AdamConfig { lr: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }, 1);
        assert_eq!(p.v, before);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = Param::new(Array2::zeros((1, 1)));
        p.g[[0, 0]] = 1.0;
        adam_step(&mut p, &AdamConfig { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }, 1);
        // First step with bias correction moves by almost exactly -lr.
        assert_abs_diff_eq!(p.v[[0, 0]], -0.01, epsilon = 1e-6);
    }
}

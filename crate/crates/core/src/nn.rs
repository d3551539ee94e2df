//! Dense layers with hand-written backward passes, and the AdamW optimizer.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn leaky_relu(x: f64, leak: f64) -> f64 {
    x.max(0.0) + leak * x.min(0.0)
}

pub fn leaky_relu_grad(x: f64, leak: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        leak
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

pub fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Numerically stable softmax of a slice, in place.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Gradient of a softmax output `p` given upstream `dp`.
pub fn softmax_backward(p: &[f64], dp: &[f64], out: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for ((o, &pi), &di) in out.iter_mut().zip(p).zip(dp) {
        *o = pi * (di - dot);
    }
}

fn check_standard(a: &Array2<f64>) {
    debug_assert!(a.is_standard_layout());
}

/// Objects that expose their trainable tensors in a fixed order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

pub(crate) fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

pub(crate) fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// Affine map `x W + b` with `W: in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) for weights and bias.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let w = Array2::from_shape_simple_fn((input, output), || rng.random_range(-bound..bound));
        let b = Array1::from_shape_simple_fn(output, || rng.random_range(-bound..bound));
        Linear { w, b }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            w: Array2::zeros((input, output)),
            b: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "linear layer expects width {}, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(x.dot(&self.w) + &self.b)
    }

    /// Accumulate parameter gradients into `grad` and return the input gradient.
    pub fn backward(&self, x: ArrayView2<f64>, dy: &Array2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    fn tensors(&self) -> [&[f64]; 2] {
        check_standard(&self.w);
        [slice(&self.w), slice1(&self.b)]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [slice_mut(&mut self.w), slice1_mut(&mut self.b)]
    }
}

/// Per-row normalization with learnable scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, NormCache) {
        let n = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row -= mean;
            let var = row.mapv(|v| v * v).sum() / n;
            *s = 1.0 / (var + NORM_EPS).sqrt();
            row *= *s;
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, NormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &NormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let n = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.dim());
        for i in 0..dy.nrows() {
            let g = dxhat.row(i);
            let xh = cache.xhat.row(i);
            let mean_g = g.sum() / n;
            let mean_gx = g.dot(&xh) / n;
            let s = cache.inv_std[i];
            for j in 0..dy.ncols() {
                dx[(i, j)] = s * (g[j] - mean_g - xh[j] * mean_gx);
            }
        }
        dx
    }
}

/// Per-feature batch normalization with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
}

/// Batch statistics observed during a train-mode pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    /// Unbiased variance, as folded into the running estimate.
    pub var_unbiased: Array1<f64>,
}

pub struct BatchNormCache {
    norm: NormCache,
    batch_stats: bool,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum: BN_MOMENTUM,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        BatchNorm {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::zeros(dim),
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward(
        &self,
        x: &Array2<f64>,
        mode: Mode,
    ) -> Result<(Array2<f64>, BatchNormCache, Option<BatchStats>)> {
        match mode {
            Mode::Train => {
                let b = x.nrows();
                if b < 2 {
                    return Err(Error::BatchStats(b));
                }
                let mean = x.mean_axis(Axis(0)).expect("non-empty batch");
                let centered = x - &mean;
                let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / b as f64;
                let inv_std = var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
                let xhat = &centered * &inv_std;
                let y = &xhat * &self.gamma + &self.beta;
                let stats = BatchStats {
                    mean,
                    var_unbiased: &var * (b as f64 / (b as f64 - 1.0)),
                };
                let cache = BatchNormCache {
                    norm: NormCache { xhat, inv_std },
                    batch_stats: true,
                };
                Ok((y, cache, Some(stats)))
            }
            Mode::Eval => {
                let inv_std = self.running_var.mapv(|v| 1.0 / (v + NORM_EPS).sqrt());
                let xhat = (x - &self.running_mean) * &inv_std;
                let y = &xhat * &self.gamma + &self.beta;
                let cache = BatchNormCache {
                    norm: NormCache { xhat, inv_std },
                    batch_stats: false,
                };
                Ok((y, cache, None))
            }
        }
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        self.running_mean = &self.running_mean * (1.0 - m) + &stats.mean * m;
        self.running_var = &self.running_var * (1.0 - m) + &stats.var_unbiased * m;
    }

    pub fn backward(&self, cache: &BatchNormCache, dy: &Array2<f64>, grad: &mut BatchNorm) -> Array2<f64> {
        let c = &cache.norm;
        grad.beta += &dy.sum_axis(Axis(0));
        grad.gamma += &(dy * &c.xhat).sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        if !cache.batch_stats {
            return dxhat * &c.inv_std;
        }
        let b = dy.nrows() as f64;
        let mean_g = dxhat.sum_axis(Axis(0)) / b;
        let mean_gx = (&dxhat * &c.xhat).sum_axis(Axis(0)) / b;
        (&dxhat - &mean_g - &(&c.xhat * &mean_gx)) * &c.inv_std
    }
}

impl ParamSet for Linear {
    fn tensors(&self) -> Vec<&[f64]> {
        Linear::tensors(self).to_vec()
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        Linear::tensors_mut(self).into_iter().collect()
    }
}

impl ParamSet for LayerNorm {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![slice1(&self.gamma), slice1(&self.beta)]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![slice1_mut(&mut self.gamma), slice1_mut(&mut self.beta)]
    }
}

/// Running statistics are buffers, not trainable tensors.
impl ParamSet for BatchNorm {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![slice1(&self.gamma), slice1(&self.beta)]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![slice1_mut(&mut self.gamma), slice1_mut(&mut self.beta)]
    }
}

pub fn xavier_normal(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Array2<f64> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid normal");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient tensor count mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                p[i] *= 1.0 - self.lr * self.weight_decay;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaky_relu_values() {
        assert_eq!(leaky_relu(1.0, 0.2), 1.0);
        assert_eq!(leaky_relu(0.0, 0.2), 0.0);
        assert!((leaky_relu(-1.0, 0.2) + 0.2).abs() < 1e-15);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut v = [2f64.ln(), 0.0];
        softmax_in_place(&mut v);
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-12 && (v[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = vec![1.0, -1.0];
        let g = vec![0.5, -2.0];
        let mut opt = AdamW::new(0.01, 0.0);
        opt.step(vec![&mut p], vec![&g]);
        assert!((p[0] - 0.99).abs() < 1e-6 && (p[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn adamw_zero_gradient_leaves_parameter_without_decay() {
        let mut p = vec![1.0, 2.0];
        let g = vec![0.0, 1.0];
        let mut opt = AdamW::new(0.01, 0.0);
        opt.step(vec![&mut p], vec![&g]);
        assert_eq!(p[0], 1.0);
        assert_ne!(p[1], 2.0);
    }

    #[test]
    fn batchnorm_train_requires_two_rows() {
        let bn = BatchNorm::new(3);
        assert!(matches!(bn.forward(&Array2::zeros((1, 3)), Mode::Train), Err(Error::BatchStats(1))));
        assert!(bn.forward(&Array2::zeros((1, 3)), Mode::Eval).is_ok());
    }
}

//! Adversarial interaction: pairwise interaction rows, Gumbel-Softmax fake
//! rows, the predictor (generator head) and the discriminator.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::dataset::Interaction;
use crate::error::{Error, Result};
use crate::nn::{
    leaky_relu, leaky_relu_grad, BatchNorm, BatchNormCache, BatchStats, LayerNorm, Linear, Mode,
    NormCache, ParamSet,
};
use crate::rng::{self, Rng};

pub const PREDICTOR_HIDDEN: usize = 128;
pub const DISCRIMINATOR_HIDDEN: usize = 4;

/// Rows `[user_i || service_j]` for each pair, with the observed targets.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionBatch {
    pub rows: Array2<f64>,
    pub targets: Array1<f64>,
}

pub fn build_interaction(
    u_embs: &Array2<f64>,
    s_embs: &Array2<f64>,
    pairs: &[Interaction],
) -> Result<InteractionBatch> {
    for p in pairs {
        if p.user >= u_embs.nrows() || p.service >= s_embs.nrows() {
            return Err(Error::Index(format!(
                "pair ({}, {}) outside {} users x {} services",
                p.user,
                p.service,
                u_embs.nrows(),
                s_embs.nrows()
            )));
        }
    }
    let users: Vec<usize> = pairs.iter().map(|p| p.user).collect();
    let services: Vec<usize> = pairs.iter().map(|p| p.service).collect();
    let rows = concatenate![
        Axis(1),
        u_embs.select(Axis(0), &users),
        s_embs.select(Axis(0), &services)
    ];
    Ok(InteractionBatch {
        rows,
        targets: pairs.iter().map(|p| p.value).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GumbelConfig {
    pub tau: f64,
    /// Row width, equal to the interaction row width.
    pub dim: usize,
}

/// How fake interaction rows are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FakeSource {
    /// Softmax((Z + G) / tau) with Gaussian Z and Gumbel G.
    Gumbel,
    /// Z itself: a continuous Gaussian negative.
    Gaussian,
}

/// Row-wise softmax of `(z + g) / tau`.
pub fn gumbel_softmax(z: &Array2<f64>, g: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
    }
    if z.dim() != g.dim() {
        return Err(Error::Shape("logit and noise shapes differ".into()));
    }
    let mut f = (z + g) / tau;
    for mut row in f.rows_mut() {
        crate::nn::softmax_in_place(row.as_slice_mut().expect("contiguous row"));
    }
    Ok(f)
}

/// Gradient with respect to the pre-noise logits of `F = softmax((z + g) / tau)`.
pub fn gumbel_softmax_backward(f: &Array2<f64>, d_f: &Array2<f64>, tau: f64) -> Array2<f64> {
    let mut out = Array2::zeros(f.dim());
    for ((fr, dr), mut orow) in f.rows().into_iter().zip(d_f.rows()).zip(out.rows_mut()) {
        let dot = fr.dot(&dr);
        for ((o, &p), &d) in orow.iter_mut().zip(fr).zip(dr) {
            *o = p * (d - dot) / tau;
        }
    }
    out
}

fn gumbel_noise(rng: &mut Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

pub fn gumbel_sample_with(batch: usize, cfg: &GumbelConfig, rng: &mut Rng) -> Result<Array2<f64>> {
    if batch < 1 {
        return Err(Error::Domain("fake batch must be non-empty".into()));
    }
    if !(cfg.tau > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {}", cfg.tau)));
    }
    let z = Array2::from_shape_simple_fn((batch, cfg.dim), || rng.sample::<f64, _>(StandardNormal));
    let g = Array2::from_shape_simple_fn((batch, cfg.dim), || gumbel_noise(rng));
    gumbel_softmax(&z, &g, cfg.tau)
}

pub fn gumbel_sample(batch: usize, cfg: &GumbelConfig, seed: u64) -> Result<Array2<f64>> {
    gumbel_sample_with(batch, cfg, &mut rng::stream(seed, 0x6B3))
}

pub fn fake_rows(batch: usize, cfg: &GumbelConfig, source: FakeSource, rng: &mut Rng) -> Result<Array2<f64>> {
    match source {
        FakeSource::Gumbel => gumbel_sample_with(batch, cfg, rng),
        FakeSource::Gaussian => {
            if batch < 1 {
                return Err(Error::Domain("fake batch must be non-empty".into()));
            }
            Ok(Array2::from_shape_simple_fn((batch, cfg.dim), || {
                rng.sample::<f64, _>(StandardNormal)
            }))
        }
    }
}

/// Shift and scale `fake` so its global mean and standard deviation match `real`.
pub fn rescale_to(fake: &Array2<f64>, real: &Array2<f64>) -> Array2<f64> {
    let stats = |a: &Array2<f64>| {
        let m = a.mean().unwrap_or(0.0);
        let sd = a.mapv(|v| (v - m) * (v - m)).mean().unwrap_or(0.0).sqrt();
        (m, sd)
    };
    let (fm, fs) = stats(fake);
    let (rm, rs) = stats(real);
    if fs == 0.0 {
        return Array2::from_elem(fake.dim(), rm);
    }
    fake.mapv(|v| (v - fm) / fs * rs + rm)
}

/// `affine -> LayerNorm -> ReLU` twice, then an affine map to one output.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorParams {
    pub l1: Linear,
    pub ln1: LayerNorm,
    pub l2: Linear,
    pub ln2: LayerNorm,
    pub l3: Linear,
}

pub struct PredictorCache {
    x: Array2<f64>,
    n1: NormCache,
    a1: Array2<f64>,
    r1: Array2<f64>,
    n2: NormCache,
    a2: Array2<f64>,
    r2: Array2<f64>,
}

fn relu(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| v.max(0.0))
}

fn relu_back(pre: &Array2<f64>, d: Array2<f64>) -> Array2<f64> {
    d * &pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

impl PredictorParams {
    pub fn init(input: usize, hidden: usize, seed: u64) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::Domain("predictor widths must be positive".into()));
        }
        let mut rng = rng::stream(seed, 0x9ED);
        Ok(PredictorParams {
            l1: Linear::init(input, hidden, &mut rng),
            ln1: LayerNorm::new(hidden),
            l2: Linear::init(hidden, hidden, &mut rng),
            ln2: LayerNorm::new(hidden),
            l3: Linear::init(hidden, 1, &mut rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let (i, h) = (self.l1.input_dim(), self.l1.output_dim());
        PredictorParams {
            l1: Linear::zeros(i, h),
            ln1: LayerNorm::zeros(h),
            l2: Linear::zeros(h, h),
            ln2: LayerNorm::zeros(h),
            l3: Linear::zeros(h, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.l1.input_dim()
    }

    pub fn forward(&self, rows: &Array2<f64>) -> Result<(Array1<f64>, PredictorCache)> {
        let h1 = self.l1.forward(rows.view())?;
        let (a1, n1) = self.ln1.forward(&h1);
        let r1 = relu(&a1);
        let h2 = self.l2.forward(r1.view())?;
        let (a2, n2) = self.ln2.forward(&h2);
        let r2 = relu(&a2);
        let out = self.l3.forward(r2.view())?.remove_axis(Axis(1));
        Ok((
            out,
            PredictorCache {
                x: rows.clone(),
                n1,
                a1,
                r1,
                n2,
                a2,
                r2,
            },
        ))
    }

    /// Accumulate gradients into `grad`; returns the gradient of the input rows.
    pub fn backward(&self, cache: &PredictorCache, d_out: &Array1<f64>, grad: &mut PredictorParams) -> Array2<f64> {
        let d3 = d_out.view().insert_axis(Axis(1)).to_owned();
        let dr2 = self.l3.backward(cache.r2.view(), &d3, &mut grad.l3);
        let da2 = relu_back(&cache.a2, dr2);
        let dh2 = self.ln2.backward(&cache.n2, &da2, &mut grad.ln2);
        let dr1 = self.l2.backward(cache.r1.view(), &dh2, &mut grad.l2);
        let da1 = relu_back(&cache.a1, dr1);
        let dh1 = self.ln1.backward(&cache.n1, &da1, &mut grad.ln1);
        self.l1.backward(cache.x.view(), &dh1, &mut grad.l1)
    }
}

impl ParamSet for PredictorParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.l1.tensors();
        v.extend(self.ln1.tensors());
        v.extend(self.l2.tensors());
        v.extend(self.ln2.tensors());
        v.extend(self.l3.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.l1.tensors_mut();
        v.extend(self.ln1.tensors_mut());
        v.extend(self.l2.tensors_mut());
        v.extend(self.ln2.tensors_mut());
        v.extend(self.l3.tensors_mut());
        v
    }
}

/// Per-row scalar predictions. Layer normalization is per row, so the mode
/// does not change the result.
pub fn predict(rows: &Array2<f64>, params: &PredictorParams, _mode: Mode) -> Result<Array1<f64>> {
    Ok(params.forward(rows)?.0)
}

/// `affine -> LeakyReLU -> BatchNorm` twice, then an affine map to one logit.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams {
    pub l1: Linear,
    pub bn1: BatchNorm,
    pub l2: Linear,
    pub bn2: BatchNorm,
    pub l3: Linear,
    pub leak: f64,
}

pub struct DiscriminatorCache {
    x: Array2<f64>,
    p1: Array2<f64>,
    c1: BatchNormCache,
    b1: Array2<f64>,
    p2: Array2<f64>,
    c2: BatchNormCache,
    b2: Array2<f64>,
}

/// Train-mode batch statistics for both normalization layers.
pub struct DiscriminatorStats(BatchStats, BatchStats);

impl DiscriminatorParams {
    pub fn init(hidden: usize, leak: f64, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Domain("discriminator width must be positive".into()));
        }
        let mut rng = rng::stream(seed, 0xD15);
        Ok(DiscriminatorParams {
            l1: Linear::init(1, hidden, &mut rng),
            bn1: BatchNorm::new(hidden),
            l2: Linear::init(hidden, hidden, &mut rng),
            bn2: BatchNorm::new(hidden),
            l3: Linear::init(hidden, 1, &mut rng),
            leak,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let h = self.l1.output_dim();
        DiscriminatorParams {
            l1: Linear::zeros(1, h),
            bn1: BatchNorm::zeros(h),
            l2: Linear::zeros(h, h),
            bn2: BatchNorm::zeros(h),
            l3: Linear::zeros(h, 1),
            leak: self.leak,
        }
    }

    /// Forward without touching running statistics.
    pub fn forward(
        &self,
        preds: &Array1<f64>,
        mode: Mode,
    ) -> Result<(Array1<f64>, DiscriminatorCache, Option<DiscriminatorStats>)> {
        let x = preds.view().insert_axis(Axis(1)).to_owned();
        let p1 = self.l1.forward(x.view())?;
        let (b1, c1, s1) = self.bn1.forward(&p1.mapv(|v| leaky_relu(v, self.leak)), mode)?;
        let p2 = self.l2.forward(b1.view())?;
        let (b2, c2, s2) = self.bn2.forward(&p2.mapv(|v| leaky_relu(v, self.leak)), mode)?;
        let out = self.l3.forward(b2.view())?.remove_axis(Axis(1));
        let stats = s1.zip(s2).map(|(a, b)| DiscriminatorStats(a, b));
        Ok((out, DiscriminatorCache { x, p1, c1, b1, p2, c2, b2 }, stats))
    }

    pub fn update_running(&mut self, stats: &DiscriminatorStats) {
        self.bn1.update_running(&stats.0);
        self.bn2.update_running(&stats.1);
    }

    /// Accumulate gradients into `grad`; returns the gradient of the inputs.
    pub fn backward(&self, cache: &DiscriminatorCache, d_out: &Array1<f64>, grad: &mut DiscriminatorParams) -> Array1<f64> {
        let leak = self.leak;
        let d3 = d_out.view().insert_axis(Axis(1)).to_owned();
        let db2 = self.l3.backward(cache.b2.view(), &d3, &mut grad.l3);
        let dl2 = self.bn2.backward(&cache.c2, &db2, &mut grad.bn2);
        let dp2 = dl2 * &cache.p2.mapv(|v| leaky_relu_grad(v, leak));
        let db1 = self.l2.backward(cache.b1.view(), &dp2, &mut grad.l2);
        let dl1 = self.bn1.backward(&cache.c1, &db1, &mut grad.bn1);
        let dp1 = dl1 * &cache.p1.mapv(|v| leaky_relu_grad(v, leak));
        self.l1.backward(cache.x.view(), &dp1, &mut grad.l1).remove_axis(Axis(1))
    }

    pub fn running_stats(&self) -> Array2<f64> {
        ndarray::stack![
            Axis(0),
            self.bn1.running_mean,
            self.bn1.running_var,
            self.bn2.running_mean,
            self.bn2.running_var
        ]
    }

    pub fn set_running_stats(&mut self, s: &Array2<f64>) -> Result<()> {
        let h = self.l1.output_dim();
        if s.dim() != (4, h) {
            return Err(Error::Shape(format!("running stats shape {:?}, expected (4, {h})", s.dim())));
        }
        self.bn1.running_mean.assign(&s.row(0));
        self.bn1.running_var.assign(&s.row(1));
        self.bn2.running_mean.assign(&s.row(2));
        self.bn2.running_var.assign(&s.row(3));
        Ok(())
    }
}

impl ParamSet for DiscriminatorParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.l1.tensors();
        v.extend(self.bn1.tensors());
        v.extend(self.l2.tensors());
        v.extend(self.bn2.tensors());
        v.extend(self.l3.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.l1.tensors_mut();
        v.extend(self.bn1.tensors_mut());
        v.extend(self.l2.tensors_mut());
        v.extend(self.bn2.tensors_mut());
        v.extend(self.l3.tensors_mut());
        v
    }
}

/// Per-sample logits. Train mode normalizes with batch statistics and folds
/// them into the running estimates; eval mode uses the running estimates.
pub fn discriminate(preds: &Array1<f64>, params: &mut DiscriminatorParams, mode: Mode) -> Result<Array1<f64>> {
    let (out, _, stats) = params.forward(preds, mode)?;
    if let Some(stats) = stats {
        params.update_running(&stats);
    }
    Ok(out)
}

/// Split interaction-row gradients back into user and service halves.
pub fn split_rows(d_rows: &Array2<f64>, user_width: usize) -> (Array2<f64>, Array2<f64>) {
    (
        d_rows.slice(s![.., ..user_width]).to_owned(),
        d_rows.slice(s![.., user_width..]).to_owned(),
    )
}

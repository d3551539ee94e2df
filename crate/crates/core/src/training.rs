//! Losses, alternating discriminator/generator optimization, early stopping,
//! evaluation and training checkpoints.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::advnet::{
    self, DiscriminatorCache, DiscriminatorParams, DiscriminatorStats, FakeSource, GumbelConfig, PredictorCache,
    PredictorParams,
};
use crate::checkpoint::Archive;
use crate::dataset::{batch_iter, Interaction, InteractionSet};
use crate::embedding::{self, EmbeddingTable};
use crate::error::{Error, Result};
use crate::graph::NeighborhoodIndex;
use crate::mogat::{self, MogatCache, MogatConfig, MogatParams};
use crate::nn::{AdamW, Mode, ParamSet};
use crate::rng::{self, Rng};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::Shape("empty loss input".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy on logits, in the overflow-free form
/// `max(x, 0) - x*y + ln(1 + e^-|x|)`.
pub fn bce_with_logits(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let s: f64 = x
        .iter()
        .zip(y)
        .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
        .sum();
    Ok(s / x.len() as f64)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient of [`bce_with_logits`] with respect to `x`.
pub fn bce_with_logits_grad(x: &[f64], y: &[f64]) -> Array1<f64> {
    let n = x.len() as f64;
    x.iter().zip(y).map(|(&x, &y)| (sigmoid(x) - y) / n).collect()
}

pub fn mse(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64)
}

pub fn mse_grad(x: &[f64], y: &[f64]) -> Array1<f64> {
    let n = x.len() as f64;
    x.iter().zip(y).map(|(a, b)| 2.0 * (a - b) / n).collect()
}

/// `lambda * bce(d_hat_t, 1) + (1 - lambda) * mse(y_hat_t, y)`.
pub fn generator_loss(d_hat_t: &[f64], y_hat_t: &[f64], y: &[f64], lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Domain(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let ones = vec![1.0; d_hat_t.len()];
    Ok(lambda * bce_with_logits(d_hat_t, &ones)? + (1.0 - lambda) * mse(y_hat_t, y)?)
}

/// `bce(d_hat_t, 1) + bce(d_hat_f, 0)`.
pub fn discriminator_loss(d_hat_t: &[f64], d_hat_f: &[f64]) -> Result<f64> {
    let ones = vec![1.0; d_hat_t.len()];
    let zeros = vec![0.0; d_hat_f.len()];
    Ok(bce_with_logits(d_hat_t, &ones)? + bce_with_logits(d_hat_f, &zeros)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub seed: u64,
    /// Attention order D.
    pub order: usize,
    /// Attention heads N.
    pub heads: usize,
    /// Embedding width R, also the per-head projection width.
    pub embed_dim: usize,
    pub predictor_hidden: usize,
    pub discriminator_hidden: usize,
    pub discriminator_leak: f64,
    pub attention_dropout: f64,
    pub init_scale: f64,
    pub adversarial_on: bool,
    pub gumbel_on: bool,
    pub max_order_override: Option<usize>,
    /// Adversarial generator term on fake predictions instead of real ones.
    pub fool_fakes: bool,
    /// Map fake rows onto the mean and spread of the real rows.
    pub rescale_fakes: bool,
    pub shared_orders: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda: 0.2,
            tau: 0.5,
            epochs: 100,
            batch_size: 128,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            patience: 15,
            seed: 0,
            order: 2,
            heads: 2,
            embed_dim: 32,
            predictor_hidden: advnet::PREDICTOR_HIDDEN,
            discriminator_hidden: advnet::DISCRIMINATOR_HIDDEN,
            discriminator_leak: 0.2,
            attention_dropout: 0.1,
            init_scale: embedding::DEFAULT_INIT_SCALE,
            adversarial_on: true,
            gumbel_on: true,
            max_order_override: None,
            fool_fakes: false,
            rescale_fakes: false,
            shared_orders: false,
        }
    }
}

impl TrainingConfig {
    pub fn effective_order(&self) -> usize {
        self.max_order_override.unwrap_or(self.order)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if self.batch_size < 1 || self.embed_dim < 1 || self.heads < 1 {
            return bad("batch size, embedding width and head count must be positive".into());
        }
        let d = self.effective_order();
        if d < 1 || d > crate::graph::MAX_ORDER {
            return bad(format!("order must lie in [1, {}], got {d}", crate::graph::MAX_ORDER));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return bad("learning rate and weight decay must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.attention_dropout));
        }
        if self.predictor_hidden < 1 || self.discriminator_hidden < 1 {
            return bad("hidden widths must be positive".into());
        }
        Ok(())
    }

    pub fn interaction_width(&self) -> usize {
        2 * self.heads * self.embed_dim
    }

    fn mogat_config(&self) -> MogatConfig {
        MogatConfig {
            dropout_rate: self.attention_dropout,
            shared_orders: self.shared_orders,
            ..MogatConfig::new(self.embed_dim, self.embed_dim, self.heads, self.effective_order())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub count: usize,
}

impl Metrics {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), truth.len())));
        }
        if pred.is_empty() {
            return Err(Error::Domain("metrics need at least one sample".into()));
        }
        let n = pred.len() as f64;
        let (mut abs, mut sq) = (0.0, 0.0);
        for (p, t) in pred.iter().zip(truth) {
            let e = p - t;
            abs += e.abs();
            sq += e * e;
        }
        Ok(Metrics {
            mae: abs / n,
            rmse: (sq / n).sqrt(),
            count: pred.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub generator_loss: f64,
    pub discriminator_loss: Option<f64>,
    pub val_mae: f64,
    pub val_rmse: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best_val_mae(&self) -> Option<f64> {
        self.records.iter().map(|r| r.val_mae).min_by(f64::total_cmp)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let ctx = || format!("writing {}", path.display());
        let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(ctx(), e))?);
        for r in &self.records {
            let line = serde_json::to_string(r).expect("plain record");
            writeln!(out, "{line}").map_err(|e| Error::io(ctx(), e))?;
        }
        out.flush().map_err(|e| Error::io(ctx(), e))
    }
}

/// Everything updated by the generator step.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub user_emb: EmbeddingTable,
    pub service_emb: EmbeddingTable,
    pub user_gat: MogatParams,
    pub service_gat: MogatParams,
    pub predictor: PredictorParams,
}

impl Generator {
    pub fn zeros_like(&self) -> Self {
        Generator {
            user_emb: EmbeddingTable {
                weights: Array2::zeros(self.user_emb.weights.dim()),
            },
            service_emb: EmbeddingTable {
                weights: Array2::zeros(self.service_emb.weights.dim()),
            },
            user_gat: self.user_gat.zeros_like(),
            service_gat: self.service_gat.zeros_like(),
            predictor: self.predictor.zeros_like(),
        }
    }

    /// Named parameter groups, in tensor order.
    pub fn modules(&self) -> [(&'static str, &dyn ParamSet); 5] {
        [
            ("user_embeddings", &self.user_emb),
            ("service_embeddings", &self.service_emb),
            ("user_attention", &self.user_gat),
            ("service_attention", &self.service_gat),
            ("predictor", &self.predictor),
        ]
    }
}

impl ParamSet for Generator {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.user_emb.tensors();
        v.extend(self.service_emb.tensors());
        v.extend(self.user_gat.tensors());
        v.extend(self.service_gat.tensors());
        v.extend(self.predictor.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.user_emb.tensors_mut();
        v.extend(self.service_emb.tensors_mut());
        v.extend(self.user_gat.tensors_mut());
        v.extend(self.service_gat.tensors_mut());
        v.extend(self.predictor.tensors_mut());
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QosModel {
    pub generator: Generator,
    pub discriminator: DiscriminatorParams,
}

impl QosModel {
    pub fn init(cfg: &TrainingConfig, user_nodes: usize, service_nodes: usize) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.seed;
        let mc = cfg.mogat_config();
        Ok(QosModel {
            generator: Generator {
                user_emb: embedding::init_embeddings(user_nodes, cfg.embed_dim, rng::derive(s, 1), cfg.init_scale)?,
                service_emb: embedding::init_embeddings(
                    service_nodes,
                    cfg.embed_dim,
                    rng::derive(s, 2),
                    cfg.init_scale,
                )?,
                user_gat: MogatParams::init(&mc, rng::derive(s, 3))?,
                service_gat: MogatParams::init(&mc, rng::derive(s, 4))?,
                predictor: PredictorParams::init(cfg.interaction_width(), cfg.predictor_hidden, rng::derive(s, 5))?,
            },
            discriminator: DiscriminatorParams::init(cfg.discriminator_hidden, cfg.discriminator_leak, rng::derive(s, 6))?,
        })
    }

    /// Trainable scalar count per module.
    pub fn param_breakdown(&self) -> Vec<(&'static str, usize)> {
        let mut v: Vec<_> = self
            .generator
            .modules()
            .iter()
            .map(|(n, p)| (*n, p.num_params()))
            .collect();
        v.push(("discriminator", self.discriminator.num_params()));
        v
    }
}

/// Neighborhood indexes of both graphs. Entity `i` is node `i`.
pub struct Graphs {
    pub users: NeighborhoodIndex,
    pub services: NeighborhoodIndex,
    pub num_users: usize,
    pub num_services: usize,
}

pub struct DataBundle {
    pub fit: InteractionSet,
    pub val: InteractionSet,
    pub test: InteractionSet,
    pub graphs: Graphs,
}

pub struct TrainState {
    pub model: QosModel,
    pub opt_g: AdamW,
    pub opt_d: AdamW,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: QosModel, cfg: &TrainingConfig) -> Self {
        TrainState {
            model,
            opt_g: AdamW::new(cfg.learning_rate, cfg.weight_decay),
            opt_d: AdamW::new(cfg.learning_rate, cfg.weight_decay),
            epoch: 0,
        }
    }
}

fn unique_local(ids: impl Iterator<Item = usize>) -> (Vec<usize>, Vec<usize>) {
    let ids: Vec<usize> = ids.collect();
    let mut uniq = ids.clone();
    uniq.sort_unstable();
    uniq.dedup();
    let local = ids.iter().map(|i| uniq.binary_search(i).expect("present")).collect();
    (uniq, local)
}

/// Forward state of one batch, shared by the discriminator and generator steps.
pub struct BatchForward {
    users: Vec<usize>,
    user_local: Vec<usize>,
    user_cache: MogatCache,
    services: Vec<usize>,
    service_local: Vec<usize>,
    service_cache: MogatCache,
    user_width: usize,
    y: Vec<f64>,
    y_t: Array1<f64>,
    real_cache: PredictorCache,
    fake: Option<(Array1<f64>, PredictorCache)>,
}

impl BatchForward {
    pub fn predictions(&self) -> &Array1<f64> {
        &self.y_t
    }

    pub fn fake_predictions(&self) -> Option<&Array1<f64>> {
        self.fake.as_ref().map(|f| &f.0)
    }
}

/// Encode the batch's users and services, build real rows and, when the
/// adversarial branch is on, a fake batch of equal size.
pub fn forward_batch(
    gen: &Generator,
    graphs: &Graphs,
    cfg: &TrainingConfig,
    batch: &[Interaction],
    rng: &mut Rng,
) -> Result<BatchForward> {
    let (users, user_local) = unique_local(batch.iter().map(|p| p.user));
    let (services, service_local) = unique_local(batch.iter().map(|p| p.service));
    let (u_out, user_cache) =
        mogat::forward(&graphs.users, &gen.user_emb.weights, &gen.user_gat, &users, Mode::Train, Some(&mut *rng))?;
    let (s_out, service_cache) = mogat::forward(
        &graphs.services,
        &gen.service_emb.weights,
        &gen.service_gat,
        &services,
        Mode::Train,
        Some(&mut *rng),
    )?;
    let local: Vec<Interaction> = batch
        .iter()
        .zip(user_local.iter().zip(&service_local))
        .map(|(p, (&u, &s))| Interaction {
            user: u,
            service: s,
            value: p.value,
        })
        .collect();
    let real = advnet::build_interaction(&u_out, &s_out, &local)?;
    let (y_t, real_cache) = gen.predictor.forward(&real.rows)?;
    let fake = if cfg.adversarial_on {
        let gcfg = GumbelConfig {
            tau: cfg.tau,
            dim: real.rows.ncols(),
        };
        let source = if cfg.gumbel_on { FakeSource::Gumbel } else { FakeSource::Gaussian };
        let mut rows = advnet::fake_rows(batch.len(), &gcfg, source, rng)?;
        if cfg.rescale_fakes {
            rows = advnet::rescale_to(&rows, &real.rows);
        }
        Some(gen.predictor.forward(&rows)?)
    } else {
        None
    };
    Ok(BatchForward {
        users,
        user_local,
        user_cache,
        services,
        service_local,
        service_cache,
        user_width: u_out.ncols(),
        y: real.targets.to_vec(),
        y_t,
        real_cache,
        fake,
    })
}

fn as_slice(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

/// Discriminator loss, its parameter gradient and the train-mode batch
/// statistics of the real and fake passes.
pub fn discriminator_gradients(
    disc: &DiscriminatorParams,
    fwd: &BatchForward,
) -> Result<(f64, DiscriminatorParams, Vec<DiscriminatorStats>)> {
    let (y_f, _) = fwd
        .fake
        .as_ref()
        .ok_or_else(|| Error::Config("discriminator step without a fake batch".into()))?;
    let (d_t, c_t, s_t) = disc.forward(&fwd.y_t, Mode::Train)?;
    let (d_f, c_f, s_f) = disc.forward(y_f, Mode::Train)?;
    let loss = discriminator_loss(as_slice(&d_t), as_slice(&d_f))?;
    let mut grad = disc.zeros_like();
    disc.backward(&c_t, &bce_with_logits_grad(as_slice(&d_t), &vec![1.0; d_t.len()]), &mut grad);
    disc.backward(&c_f, &bce_with_logits_grad(as_slice(&d_f), &vec![0.0; d_f.len()]), &mut grad);
    Ok((loss, grad, [s_t, s_f].into_iter().flatten().collect()))
}

/// One optimizer step on the discriminator loss. The generator is not
/// reachable from here; batch statistics of both passes are folded into the
/// running estimates.
pub fn discriminator_step(
    disc: &mut DiscriminatorParams,
    opt: &mut AdamW,
    fwd: &BatchForward,
    ctx: (usize, usize),
) -> Result<f64> {
    let (loss, grad, stats) = discriminator_gradients(disc, fwd)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            what: "discriminator",
            epoch: ctx.0,
            batch: ctx.1,
        });
    }
    for s in &stats {
        disc.update_running(s);
    }
    opt.step(disc.tensors_mut(), grad.tensors());
    Ok(loss)
}

fn frozen_adversarial(
    disc: &DiscriminatorParams,
    preds: &Array1<f64>,
    lambda: f64,
) -> Result<(f64, Array1<f64>)> {
    let (d, cache, _): (Array1<f64>, DiscriminatorCache, _) = disc.forward(preds, Mode::Train)?;
    let ones = vec![1.0; d.len()];
    let term = bce_with_logits(as_slice(&d), &ones)?;
    let mut scratch = disc.zeros_like();
    let d_pred = disc.backward(&cache, &(bce_with_logits_grad(as_slice(&d), &ones) * lambda), &mut scratch);
    Ok((lambda * term, d_pred))
}

/// Generator loss and its gradient for every generator parameter. The
/// discriminator normalizes with batch statistics but is only read.
pub fn generator_gradients(
    gen: &Generator,
    disc: &DiscriminatorParams,
    graphs: &Graphs,
    cfg: &TrainingConfig,
    fwd: &BatchForward,
) -> Result<(f64, Generator)> {
    let mut grad = gen.zeros_like();
    let y_t = as_slice(&fwd.y_t);
    let reg_weight = if cfg.adversarial_on { 1.0 - cfg.lambda } else { 1.0 };
    let mut loss = reg_weight * mse(y_t, &fwd.y)?;
    let mut d_yt = mse_grad(y_t, &fwd.y) * reg_weight;
    if cfg.adversarial_on {
        if cfg.fool_fakes {
            let (y_f, f_cache) = fwd.fake.as_ref().expect("fake batch present when adversarial");
            let (term, d_yf) = frozen_adversarial(disc, y_f, cfg.lambda)?;
            loss += term;
            // Fake rows carry no parameters; only the predictor sees this path.
            gen.predictor.backward(f_cache, &d_yf, &mut grad.predictor);
        } else {
            let (term, d_adv) = frozen_adversarial(disc, &fwd.y_t, cfg.lambda)?;
            loss += term;
            d_yt += &d_adv;
        }
    }
    let d_rows = gen.predictor.backward(&fwd.real_cache, &d_yt, &mut grad.predictor);
    let (du, ds) = advnet::split_rows(&d_rows, fwd.user_width);

    let mut du_out = Array2::zeros((fwd.users.len(), fwd.user_width));
    embedding::scatter_add(&mut du_out, &fwd.user_local, &du);
    let (ids, dh) = mogat::backward(&graphs.users, &gen.user_gat, &fwd.user_cache, &du_out, &mut grad.user_gat);
    embedding::scatter_add(&mut grad.user_emb.weights, &ids, &dh);

    let mut ds_out = Array2::zeros((fwd.services.len(), ds.ncols()));
    embedding::scatter_add(&mut ds_out, &fwd.service_local, &ds);
    let (ids, dh) = mogat::backward(
        &graphs.services,
        &gen.service_gat,
        &fwd.service_cache,
        &ds_out,
        &mut grad.service_gat,
    );
    embedding::scatter_add(&mut grad.service_emb.weights, &ids, &dh);

    Ok((loss, grad))
}

/// One optimizer step on the generator loss. The discriminator is borrowed
/// immutably, so nothing on it changes.
pub fn generator_step(
    gen: &mut Generator,
    opt: &mut AdamW,
    disc: &DiscriminatorParams,
    graphs: &Graphs,
    cfg: &TrainingConfig,
    fwd: &BatchForward,
    ctx: (usize, usize),
) -> Result<f64> {
    let (loss, grad) = generator_gradients(gen, disc, graphs, cfg, fwd)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            what: "generator",
            epoch: ctx.0,
            batch: ctx.1,
        });
    }
    opt.step(gen.tensors_mut(), grad.tensors());
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub generator_loss: f64,
    pub discriminator_loss: Option<f64>,
    pub batches: usize,
}

/// One pass over `fit`: per batch a discriminator step (adversarial branch
/// only) followed by a generator step.
pub fn train_epoch(
    state: &mut TrainState,
    fit: &InteractionSet,
    graphs: &Graphs,
    cfg: &TrainingConfig,
    epoch_seed: u64,
) -> Result<EpochStats> {
    if fit.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    let mut batches: Vec<Vec<Interaction>> = batch_iter(fit, cfg.batch_size, epoch_seed, true)?.collect();
    // A trailing singleton batch has no batch statistics; fold it into its neighbor.
    if batches.len() > 1 && batches.last().map(Vec::len) == Some(1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    let epoch = state.epoch + 1;
    let mut rng = rng::stream(epoch_seed, 0xF0D);
    let (mut g_sum, mut d_sum) = (0.0, 0.0);
    for (bi, batch) in batches.iter().enumerate() {
        let fwd = forward_batch(&state.model.generator, graphs, cfg, batch, &mut rng)?;
        if cfg.adversarial_on {
            d_sum += discriminator_step(&mut state.model.discriminator, &mut state.opt_d, &fwd, (epoch, bi))?;
        }
        g_sum += generator_step(
            &mut state.model.generator,
            &mut state.opt_g,
            &state.model.discriminator,
            graphs,
            cfg,
            &fwd,
            (epoch, bi),
        )?;
    }
    state.epoch = epoch;
    let n = batches.len() as f64;
    Ok(EpochStats {
        generator_loss: g_sum / n,
        discriminator_loss: cfg.adversarial_on.then_some(d_sum / n),
        batches: batches.len(),
    })
}

/// Final user and service representations for the given entity ids.
pub fn encode_entities(
    gen: &Generator,
    graphs: &Graphs,
    users: &[usize],
    services: &[usize],
) -> Result<(Array2<f64>, Array2<f64>)> {
    Ok((
        mogat::encode(&graphs.users, &gen.user_emb.weights, &gen.user_gat, users)?,
        mogat::encode(&graphs.services, &gen.service_emb.weights, &gen.service_gat, services)?,
    ))
}

const PREDICT_CHUNK: usize = 4096;

/// Evaluation-mode predictions for `pairs`.
pub fn predict_pairs(gen: &Generator, graphs: &Graphs, pairs: &[Interaction]) -> Result<Array1<f64>> {
    let (users, user_local) = unique_local(pairs.iter().map(|p| p.user));
    let (services, service_local) = unique_local(pairs.iter().map(|p| p.service));
    let (u, s) = encode_entities(gen, graphs, &users, &services)?;
    let local: Vec<Interaction> = pairs
        .iter()
        .zip(user_local.iter().zip(&service_local))
        .map(|(p, (&ul, &sl))| Interaction {
            user: ul,
            service: sl,
            value: p.value,
        })
        .collect();
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in local.chunks(PREDICT_CHUNK) {
        let rows = advnet::build_interaction(&u, &s, chunk)?;
        out.extend(advnet::predict(&rows.rows, &gen.predictor, Mode::Eval)?);
    }
    Ok(Array1::from(out))
}

pub fn evaluate(model: &QosModel, graphs: &Graphs, set: &InteractionSet) -> Result<Metrics> {
    if set.is_empty() {
        return Err(Error::Domain("evaluation set is empty".into()));
    }
    let pred = predict_pairs(&model.generator, graphs, &set.triples)?;
    let truth: Vec<f64> = set.triples.iter().map(|t| t.value).collect();
    Metrics::compute(as_slice(&pred), &truth)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Validation-MAE early stopping: halts once the run of consecutive
/// non-improving epochs reaches `max(patience, 1)`.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, mae: f64) -> StopDecision {
        if mae < self.best {
            self.best = mae;
            self.best_epoch = epoch;
            self.since = 0;
            return StopDecision::Improved;
        }
        self.since += 1;
        if self.since >= self.patience.max(1) {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

pub fn fit(bundle: &DataBundle, cfg: &TrainingConfig) -> Result<(QosModel, TrainHistory)> {
    fit_with(bundle, cfg, |_| Ok(()))
}

/// Train up to `cfg.epochs`, early-stopping on validation MAE, and return the
/// parameters of the best validation epoch. `on_epoch` sees each record as it
/// is produced.
pub fn fit_with(
    bundle: &DataBundle,
    cfg: &TrainingConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<(QosModel, TrainHistory)> {
    cfg.validate()?;
    if bundle.val.is_empty() {
        return Err(Error::Domain("early stopping needs a non-empty validation set".into()));
    }
    let model = QosModel::init(
        cfg,
        bundle.graphs.users.num_nodes(),
        bundle.graphs.services.num_nodes(),
    )?;
    let mut state = TrainState::new(model, cfg);
    let mut best = state.model.clone();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut history = TrainHistory::default();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let stats = train_epoch(&mut state, &bundle.fit, &bundle.graphs, cfg, rng::derive(cfg.seed, 0x1000 + epoch as u64))?;
        let val = evaluate(&state.model, &bundle.graphs, &bundle.val)?;
        let record = EpochRecord {
            epoch,
            generator_loss: stats.generator_loss,
            discriminator_loss: stats.discriminator_loss,
            val_mae: val.mae,
            val_rmse: val.rmse,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} val mae {:.5} rmse {:.5} ({:.1}s)",
            record.generator_loss,
            val.mae,
            val.rmse,
            record.seconds
        );
        on_epoch(&record)?;
        history.records.push(record);
        match stopper.observe(epoch, val.mae) {
            StopDecision::Improved => best = state.model.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                history.stopped_early = true;
                break;
            }
        }
    }
    history.best_epoch = stopper.best_epoch();
    Ok((best, history))
}

fn push_params(archive: &mut Archive, prefix: &str, p: &dyn ParamSet) {
    for (i, t) in p.tensors().iter().enumerate() {
        archive.push(format!("{prefix}.{i}"), Array2::from_shape_vec((1, t.len()), t.to_vec()).expect("row"));
    }
}

fn load_params(archive: &Archive, prefix: &str, p: &mut dyn ParamSet) -> Result<()> {
    for (i, t) in p.tensors_mut().into_iter().enumerate() {
        let name = format!("{prefix}.{i}");
        let a = archive.get(&name)?;
        if a.len() != t.len() {
            return Err(Error::Checkpoint(format!("section `{name}` has {} values, expected {}", a.len(), t.len())));
        }
        t.copy_from_slice(a.as_slice().expect("standard layout"));
    }
    Ok(())
}

fn push_optimizer(archive: &mut Archive, name: &str, opt: &AdamW) {
    archive.meta.insert(format!("{name}.step"), opt.step.to_string());
    for (kind, state) in [("m", &opt.m), ("v", &opt.v)] {
        for (i, t) in state.iter().enumerate() {
            archive.push(format!("{name}.{kind}.{i}"), Array2::from_shape_vec((1, t.len()), t.clone()).expect("row"));
        }
    }
}

fn load_optimizer(archive: &Archive, name: &str, opt: &mut AdamW, shapes: &[usize]) -> Result<()> {
    opt.step = meta_parse(archive, &format!("{name}.step"))?;
    if opt.step == 0 {
        return Ok(());
    }
    for (kind, state) in [("m", &mut opt.m), ("v", &mut opt.v)] {
        state.clear();
        for (i, &len) in shapes.iter().enumerate() {
            let a = archive.get(&format!("{name}.{kind}.{i}"))?;
            if a.len() != len {
                return Err(Error::Checkpoint(format!("optimizer section {name}.{kind}.{i} has wrong length")));
            }
            state.push(a.iter().copied().collect());
        }
    }
    Ok(())
}

fn meta_parse<T: std::str::FromStr>(archive: &Archive, key: &str) -> Result<T> {
    archive
        .meta
        .get(key)
        .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("unreadable metadata `{key}`")))
}

/// Archive holding the config echo, all parameters, running statistics,
/// optimizer state and the epoch counter.
pub fn to_archive(state: &TrainState, cfg: &TrainingConfig) -> Archive {
    let mut a = Archive::default();
    let gen = &state.model.generator;
    a.meta.insert("kind".into(), "qosmgaa-train-state".into());
    a.meta.insert("config".into(), serde_json::to_string(cfg).expect("plain config"));
    a.meta.insert("epoch".into(), state.epoch.to_string());
    a.meta.insert("user_nodes".into(), gen.user_emb.num_nodes().to_string());
    a.meta.insert("service_nodes".into(), gen.service_emb.num_nodes().to_string());
    for (name, p) in gen.modules() {
        push_params(&mut a, name, p);
    }
    push_params(&mut a, "discriminator", &state.model.discriminator);
    a.push("discriminator.running", state.model.discriminator.running_stats());
    push_optimizer(&mut a, "opt_g", &state.opt_g);
    push_optimizer(&mut a, "opt_d", &state.opt_d);
    a
}

pub fn from_archive(a: &Archive) -> Result<(TrainState, TrainingConfig)> {
    let cfg: TrainingConfig = serde_json::from_str(
        a.meta
            .get("config")
            .ok_or_else(|| Error::Checkpoint("missing config echo".into()))?,
    )
    .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
    let model = QosModel::init(&cfg, meta_parse(a, "user_nodes")?, meta_parse(a, "service_nodes")?)?;
    let mut state = TrainState::new(model, &cfg);
    state.epoch = meta_parse(a, "epoch")?;
    let gen = &mut state.model.generator;
    load_params(a, "user_embeddings", &mut gen.user_emb)?;
    load_params(a, "service_embeddings", &mut gen.service_emb)?;
    load_params(a, "user_attention", &mut gen.user_gat)?;
    load_params(a, "service_attention", &mut gen.service_gat)?;
    load_params(a, "predictor", &mut gen.predictor)?;
    let disc = &mut state.model.discriminator;
    load_params(a, "discriminator", disc)?;
    disc.set_running_stats(a.get("discriminator.running")?)?;
    let g_shapes: Vec<usize> = state.model.generator.tensors().iter().map(|t| t.len()).collect();
    let d_shapes: Vec<usize> = state.model.discriminator.tensors().iter().map(|t| t.len()).collect();
    load_optimizer(a, "opt_g", &mut state.opt_g, &g_shapes)?;
    load_optimizer(a, "opt_d", &mut state.opt_d, &d_shapes)?;
    Ok((state, cfg))
}

pub fn save_checkpoint(state: &TrainState, cfg: &TrainingConfig, path: impl AsRef<Path>) -> Result<()> {
    to_archive(state, cfg).save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(TrainState, TrainingConfig)> {
    from_archive(&Archive::load(path)?)
}

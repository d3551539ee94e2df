//! Neighborhood collaborative filtering (UPCC, IPCC, UIPCC) and
//! probabilistic matrix factorization.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Interaction, InteractionSet};
use crate::error::{Error, Result};
use crate::rng;

/// A sparse row: `(column, value)` sorted by column.
pub type SparseRow = Vec<(u32, f64)>;

/// Pearson correlation over the columns two sparse rows share.
///
/// `None` when fewer than two columns are shared or either side has zero
/// variance on them.
pub fn pearson(u: &[(u32, f64)], v: &[(u32, f64)]) -> Option<f64> {
    let (mut i, mut j) = (0, 0);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    while i < u.len() && j < v.len() {
        match u[i].0.cmp(&v[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                xs.push(u[i].1);
                ys.push(v[j].1);
                i += 1;
                j += 1;
            }
        }
    }
    pearson_paired(&xs, &ys)
}

/// Pearson correlation of two fully paired samples.
pub fn pearson_paired(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Observed training values indexed both by user and by service.
#[derive(Clone, Debug)]
pub struct RatingIndex {
    pub by_user: Vec<SparseRow>,
    pub by_service: Vec<SparseRow>,
    pub user_mean: Vec<Option<f64>>,
    pub service_mean: Vec<Option<f64>>,
    pub global_mean: f64,
}

fn row_mean(r: &SparseRow) -> Option<f64> {
    (!r.is_empty()).then(|| r.iter().map(|x| x.1).sum::<f64>() / r.len() as f64)
}

impl RatingIndex {
    pub fn new(train: &InteractionSet, num_users: usize, num_services: usize) -> Result<Self> {
        let mean = train
            .mean_value()
            .ok_or_else(|| Error::Domain("training set is empty".into()))?;
        let mut by_user = vec![Vec::new(); num_users];
        let mut by_service = vec![Vec::new(); num_services];
        for t in &train.triples {
            if t.user >= num_users || t.service >= num_services {
                return Err(Error::Index(format!("pair ({}, {}) outside matrix", t.user, t.service)));
            }
            by_user[t.user].push((t.service as u32, t.value));
            by_service[t.service].push((t.user as u32, t.value));
        }
        for r in by_user.iter_mut().chain(by_service.iter_mut()) {
            r.sort_by_key(|x| x.0);
        }
        Ok(RatingIndex {
            user_mean: by_user.iter().map(row_mean).collect(),
            service_mean: by_service.iter().map(row_mean).collect(),
            by_user,
            by_service,
            global_mean: mean,
        })
    }
}

/// Pairwise Pearson similarities between rows; pairs without a defined value
/// are absent. The diagonal is not stored.
#[derive(Clone, Debug)]
pub struct SimilarityCache {
    rows: Vec<Vec<(u32, f64, u32)>>,
}

fn co_count(u: &[(u32, f64)], v: &[(u32, f64)]) -> u32 {
    let (mut i, mut j, mut c) = (0, 0, 0);
    while i < u.len() && j < v.len() {
        match u[i].0.cmp(&v[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                c += 1;
                i += 1;
                j += 1;
            }
        }
    }
    c
}

impl SimilarityCache {
    pub fn build(rows: &[SparseRow]) -> Self {
        let sims = (0..rows.len())
            .into_par_iter()
            .map(|a| {
                (0..rows.len())
                    .filter(|&b| b != a)
                    .filter_map(|b| {
                        pearson(&rows[a], &rows[b]).map(|s| (b as u32, s, co_count(&rows[a], &rows[b])))
                    })
                    .collect()
            })
            .collect();
        SimilarityCache { rows: sims }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `Some(1.0)` on the diagonal of a row that has any defined similarity.
    pub fn get(&self, a: usize, b: usize) -> Option<f64> {
        if a == b {
            return (!self.rows[a].is_empty()).then_some(1.0);
        }
        let r = &self.rows[a];
        r.binary_search_by_key(&(b as u32), |x| x.0).ok().map(|i| r[i].1)
    }

    pub fn co_observed(&self, a: usize, b: usize) -> Option<u32> {
        let r = &self.rows[a];
        r.binary_search_by_key(&(b as u32), |x| x.0).ok().map(|i| r[i].2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfConfig {
    pub k: usize,
    pub alpha: f64,
    /// Also use negatively correlated neighbors (weighted by `|sim|`).
    pub allow_negative: bool,
}

impl Default for CfConfig {
    fn default() -> Self {
        CfConfig {
            k: 10,
            alpha: 0.5,
            allow_negative: false,
        }
    }
}

/// Fitted neighborhood model holding both similarity caches.
#[derive(Clone, Debug)]
pub struct NeighborhoodCf {
    pub ratings: RatingIndex,
    pub users: SimilarityCache,
    pub services: SimilarityCache,
    pub cfg: CfConfig,
}

fn lookup(row: &SparseRow, col: usize) -> Option<f64> {
    row.binary_search_by_key(&(col as u32), |x| x.0).ok().map(|i| row[i].1)
}

impl NeighborhoodCf {
    pub fn fit(train: &InteractionSet, num_users: usize, num_services: usize, cfg: CfConfig) -> Result<Self> {
        if cfg.k < 1 {
            return Err(Error::Domain("neighbor count k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&cfg.alpha) {
            return Err(Error::Domain(format!("blend weight must lie in [0, 1], got {}", cfg.alpha)));
        }
        let ratings = RatingIndex::new(train, num_users, num_services)?;
        let users = SimilarityCache::build(&ratings.by_user);
        let services = SimilarityCache::build(&ratings.by_service);
        Ok(NeighborhoodCf {
            ratings,
            users,
            services,
            cfg,
        })
    }

    /// Mean-centered top-k estimate for `target` on `col`.
    /// `observers` lists the rows that observed `col`.
    fn neighborhood_estimate(
        &self,
        sims: &SimilarityCache,
        means: &[Option<f64>],
        target: usize,
        observers: &SparseRow,
    ) -> Option<f64> {
        let mut cands: Vec<(f64, u32, f64)> = observers
            .iter()
            .filter(|&&(v, _)| v as usize != target)
            .filter_map(|&(v, r)| {
                let s = sims.get(target, v as usize)?;
                let ok = if self.cfg.allow_negative { s != 0.0 } else { s > 0.0 };
                ok.then_some((s, v, r))
            })
            .collect();
        if cands.is_empty() {
            return None;
        }
        let target_mean = means[target]?;
        cands.sort_by(|a, b| b.0.abs().total_cmp(&a.0.abs()).then(a.1.cmp(&b.1)));
        cands.truncate(self.cfg.k);
        let (mut num, mut den) = (0.0, 0.0);
        for (s, v, r) in cands {
            let m = means[v as usize].expect("an observer has a mean");
            num += s * (r - m);
            den += s.abs();
        }
        Some(target_mean + num / den)
    }

    pub fn upcc(&self, user: usize, service: usize) -> f64 {
        let r = &self.ratings;
        self.neighborhood_estimate(&self.users, &r.user_mean, user, &r.by_service[service])
            .or(r.user_mean[user])
            .or(r.service_mean[service])
            .unwrap_or(r.global_mean)
    }

    pub fn ipcc(&self, user: usize, service: usize) -> f64 {
        let r = &self.ratings;
        self.neighborhood_estimate(&self.services, &r.service_mean, service, &r.by_user[user])
            .or(r.service_mean[service])
            .or(r.user_mean[user])
            .unwrap_or(r.global_mean)
    }

    pub fn uipcc(&self, user: usize, service: usize) -> f64 {
        let a = self.cfg.alpha;
        a * self.upcc(user, service) + (1.0 - a) * self.ipcc(user, service)
    }

    /// Observed training value, if any.
    pub fn observed(&self, user: usize, service: usize) -> Option<f64> {
        lookup(&self.ratings.by_user[user], service)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmfConfig {
    pub rank: usize,
    pub lr: f64,
    pub mu: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for PmfConfig {
    fn default() -> Self {
        PmfConfig {
            rank: 10,
            lr: 1e-2,
            mu: 0.1,
            epochs: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PmfModel {
    pub users: Array2<f64>,
    pub services: Array2<f64>,
    pub rank: usize,
    pub mu: f64,
}

impl PmfModel {
    pub fn num_params(&self) -> usize {
        self.users.len() + self.services.len()
    }
}

/// Stochastic gradient descent on squared error with L2 penalty `mu` on the
/// factor rows touched by each sample. Returns the model and per-epoch
/// training loss.
pub fn pmf_fit(
    train: &InteractionSet,
    num_users: usize,
    num_services: usize,
    cfg: &PmfConfig,
) -> Result<(PmfModel, Vec<f64>)> {
    if cfg.rank < 1 {
        return Err(Error::Domain("factor rank must be at least 1".into()));
    }
    if !(cfg.lr > 0.0) || !(cfg.mu >= 0.0) {
        return Err(Error::Domain("learning rate must be positive and regularization non-negative".into()));
    }
    if train.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    if let Some(t) = train.triples.iter().find(|t| t.user >= num_users || t.service >= num_services) {
        return Err(Error::Index(format!("pair ({}, {}) outside matrix", t.user, t.service)));
    }
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let mut init = rng::stream(cfg.seed, 0x9F);
    let mut users = Array2::from_shape_simple_fn((num_users, cfg.rank), || normal.sample(&mut init));
    let mut services = Array2::from_shape_simple_fn((num_services, cfg.rank), || normal.sample(&mut init));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, 0x5F);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut loss = 0.0;
        for &i in &order {
            let Interaction { user, service, value } = train.triples[i];
            let mut u = users.row_mut(user);
            let mut s = services.row_mut(service);
            let e = value - u.dot(&s);
            loss += e * e;
            for k in 0..cfg.rank {
                let (uk, sk) = (u[k], s[k]);
                u[k] += cfg.lr * (e * sk - cfg.mu * uk);
                s[k] += cfg.lr * (e * uk - cfg.mu * sk);
            }
        }
        loss /= train.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                what: "factorization",
                epoch,
                batch: 0,
            });
        }
        losses.push(loss);
    }
    Ok((
        PmfModel {
            users,
            services,
            rank: cfg.rank,
            mu: cfg.mu,
        },
        losses,
    ))
}

pub fn pmf_predict(model: &PmfModel, user: usize, service: usize) -> f64 {
    model.users.row(user).dot(&model.services.row(service))
}

//! Multi-order, multi-head graph attention.
//!
//! For head `n` and order `d`, node `i` attends over its exact-distance-`d`
//! neighbors `k` with
//!
//! ```text
//! z_k     = h_k W[n,d]
//! e_ik    = LeakyReLU(a[n,d] . [z_i || z_k])
//! alpha   = softmax_k(e_ik)
//! out_i^n = ELU( sum_d sum_k alpha_ik z_k )
//! ```
//!
//! and the head outputs are concatenated. Dropout, when training, is applied
//! to the normalized attention weights.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::graph::NeighborhoodIndex;
use crate::nn::{self, elu, elu_grad, leaky_relu, leaky_relu_grad, xavier_normal, Mode, ParamSet};
use crate::rng::{self, Rng};

pub const DEFAULT_LEAK: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct MogatConfig {
    pub in_dim: usize,
    pub proj_dim: usize,
    pub heads: usize,
    pub max_order: usize,
    pub leak: f64,
    pub dropout_rate: f64,
    /// One projection and attention vector per head, reused for every order.
    pub shared_orders: bool,
}

impl MogatConfig {
    pub fn new(in_dim: usize, proj_dim: usize, heads: usize, max_order: usize) -> Self {
        MogatConfig {
            in_dim,
            proj_dim,
            heads,
            max_order,
            leak: DEFAULT_LEAK,
            dropout_rate: 0.1,
            shared_orders: false,
        }
    }
}

/// Projection `w: in x proj` and attention vector `a: 2*proj` for one (head, order).
#[derive(Clone, Debug, PartialEq)]
pub struct OrderParams {
    pub w: Array2<f64>,
    pub a: Array1<f64>,
}

impl OrderParams {
    fn zeros_like(&self) -> Self {
        OrderParams {
            w: Array2::zeros(self.w.dim()),
            a: Array1::zeros(self.a.len()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MogatParams {
    /// `heads[n][k]`; `k` is the order index, or always 0 when orders share parameters.
    pub heads: Vec<Vec<OrderParams>>,
    pub max_order: usize,
    pub leak: f64,
    pub dropout_rate: f64,
    pub shared_orders: bool,
}

impl MogatParams {
    pub fn init(cfg: &MogatConfig, seed: u64) -> Result<Self> {
        if cfg.in_dim == 0 || cfg.proj_dim == 0 || cfg.heads == 0 {
            return Err(Error::Domain("attention dimensions and head count must be positive".into()));
        }
        if cfg.max_order == 0 || cfg.max_order > crate::graph::MAX_ORDER {
            return Err(Error::Domain(format!("attention order {} unsupported", cfg.max_order)));
        }
        if !(cfg.leak > 0.0 && cfg.leak < 1.0) {
            return Err(Error::Domain(format!("leak must lie in (0, 1), got {}", cfg.leak)));
        }
        if !(0.0..1.0).contains(&cfg.dropout_rate) {
            return Err(Error::Domain(format!("dropout must lie in [0, 1), got {}", cfg.dropout_rate)));
        }
        let mut rng = rng::stream(seed, 0x6A7);
        let sets = if cfg.shared_orders { 1 } else { cfg.max_order };
        let heads = (0..cfg.heads)
            .map(|_| {
                (0..sets)
                    .map(|_| OrderParams {
                        w: xavier_normal(cfg.in_dim, cfg.proj_dim, cfg.in_dim, cfg.proj_dim, &mut rng),
                        a: xavier_normal(1, 2 * cfg.proj_dim, 2 * cfg.proj_dim, 1, &mut rng)
                            .remove_axis(Axis(0)),
                    })
                    .collect()
            })
            .collect();
        Ok(MogatParams {
            heads,
            max_order: cfg.max_order,
            leak: cfg.leak,
            dropout_rate: cfg.dropout_rate,
            shared_orders: cfg.shared_orders,
        })
    }

    pub fn zeros_like(&self) -> Self {
        MogatParams {
            heads: self
                .heads
                .iter()
                .map(|h| h.iter().map(OrderParams::zeros_like).collect())
                .collect(),
            ..self.clone()
        }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn in_dim(&self) -> usize {
        self.heads[0][0].w.nrows()
    }

    pub fn proj_dim(&self) -> usize {
        self.heads[0][0].w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.num_heads() * self.proj_dim()
    }

    /// Parameters for `head` at 1-based `order`.
    pub fn order(&self, head: usize, order: usize) -> &OrderParams {
        let k = if self.shared_orders { 0 } else { order - 1 };
        &self.heads[head][k]
    }

    fn slot(&self, order: usize) -> usize {
        if self.shared_orders {
            0
        } else {
            order - 1
        }
    }
}

impl ParamSet for MogatParams {
    fn tensors(&self) -> Vec<&[f64]> {
        self.heads
            .iter()
            .flatten()
            .flat_map(|p| [nn::slice(&p.w), nn::slice1(&p.a)])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.heads
            .iter_mut()
            .flatten()
            .flat_map(|p| [nn::slice_mut(&mut p.w), nn::slice1_mut(&mut p.a)])
            .collect()
    }
}

/// `a . [h_i W || h_j W]`.
pub fn attention_logits(
    h_i: ArrayView1<f64>,
    h_j: ArrayView1<f64>,
    w: &Array2<f64>,
    a: &Array1<f64>,
) -> Result<f64> {
    if h_i.len() != w.nrows() || h_j.len() != w.nrows() {
        return Err(Error::Shape(format!(
            "feature width {} / {} does not match projection rows {}",
            h_i.len(),
            h_j.len(),
            w.nrows()
        )));
    }
    let p = w.ncols();
    if a.len() != 2 * p {
        return Err(Error::Shape(format!(
            "attention vector has length {}, expected {}",
            a.len(),
            2 * p
        )));
    }
    let zi = h_i.dot(w);
    let zj = h_j.dot(w);
    Ok(a.slice(s![..p]).dot(&zi) + a.slice(s![p..]).dot(&zj))
}

fn check_features(index: &NeighborhoodIndex, features: &Array2<f64>, params: &MogatParams) -> Result<()> {
    if features.nrows() != index.num_nodes() {
        return Err(Error::Shape(format!(
            "{} feature rows for a graph of {} nodes",
            features.nrows(),
            index.num_nodes()
        )));
    }
    if features.ncols() != params.in_dim() {
        return Err(Error::Shape(format!(
            "feature width {} does not match attention input {}",
            features.ncols(),
            params.in_dim()
        )));
    }
    if index.max_order() < params.max_order {
        return Err(Error::Shape(format!(
            "neighborhood index holds orders up to {}, attention needs {}",
            index.max_order(),
            params.max_order
        )));
    }
    Ok(())
}

/// Evaluation-mode attention of `node` over its order-`order` neighbors for one head.
pub fn attention_weights(
    node: usize,
    order: usize,
    head: usize,
    index: &NeighborhoodIndex,
    features: &Array2<f64>,
    params: &MogatParams,
) -> Result<(Vec<usize>, Vec<f64>)> {
    check_features(index, features, params)?;
    if order == 0 || order > params.max_order {
        return Err(Error::Domain(format!("order {order} outside [1, {}]", params.max_order)));
    }
    if head >= params.num_heads() || node >= index.num_nodes() {
        return Err(Error::Index(format!("head {head} / node {node} out of range")));
    }
    let p = params.order(head, order);
    let neigh: Vec<usize> = index.get(node, order).iter().map(|&k| k as usize).collect();
    let mut w: Vec<f64> = neigh
        .iter()
        .map(|&k| {
            attention_logits(features.row(node), features.row(k), &p.w, &p.a)
                .map(|e| leaky_relu(e, params.leak))
        })
        .collect::<Result<_>>()?;
    if !w.is_empty() {
        nn::softmax_in_place(&mut w);
    }
    Ok((neigh, w))
}

/// Intermediate values kept for the backward pass.
pub struct MogatCache {
    targets: Vec<usize>,
    /// Node ids whose features enter the computation, sorted.
    touched: Vec<usize>,
    /// `local[node]` = position in `touched`, or `u32::MAX`.
    local: Vec<u32>,
    h: Array2<f64>,
    heads: Vec<HeadCache>,
}

struct HeadCache {
    /// Per order slot: projected touched features.
    z: Vec<Array2<f64>>,
    /// Pre-activation aggregate per target.
    agg: Array2<f64>,
    /// Flattened over (target, order, neighbor) in iteration order.
    logit: Vec<f64>,
    alpha: Vec<f64>,
    keep: Vec<f64>,
}

impl MogatCache {
    pub fn targets(&self) -> &[usize] {
        &self.targets
    }
}

/// Forward pass restricted to `targets`; output row `r` belongs to `targets[r]`.
///
/// A node's output depends only on features within distance `max_order`, so
/// this equals the full-graph forward followed by a row gather.
pub fn forward(
    index: &NeighborhoodIndex,
    features: &Array2<f64>,
    params: &MogatParams,
    targets: &[usize],
    mode: Mode,
    rng: Option<&mut Rng>,
) -> Result<(Array2<f64>, MogatCache)> {
    check_features(index, features, params)?;
    let n = index.num_nodes();
    if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::Index(format!("target node {bad} outside graph of {n} nodes")));
    }
    let max_order = params.max_order;
    let mut local = vec![u32::MAX; n];
    let mut touched = Vec::new();
    for &t in targets {
        for d in 1..=max_order {
            for &k in index.get(t, d) {
                if local[k as usize] == u32::MAX {
                    local[k as usize] = 0;
                    touched.push(k as usize);
                }
            }
        }
        if local[t] == u32::MAX {
            local[t] = 0;
            touched.push(t);
        }
    }
    touched.sort_unstable();
    for (pos, &node) in touched.iter().enumerate() {
        local[node] = pos as u32;
    }
    let h = features.select(Axis(0), &touched);

    let drop = match mode {
        Mode::Train if params.dropout_rate > 0.0 => params.dropout_rate,
        _ => 0.0,
    };
    let mut rng = rng;
    if drop > 0.0 && rng.is_none() {
        return Err(Error::Domain("training-mode dropout needs a random stream".into()));
    }

    let proj = params.proj_dim();
    let mut out = Array2::zeros((targets.len(), params.out_dim()));
    let mut head_caches = Vec::with_capacity(params.num_heads());
    for (hi, head) in params.heads.iter().enumerate() {
        let z: Vec<Array2<f64>> = head.iter().map(|p| h.dot(&p.w)).collect();
        let scores: Vec<(Array1<f64>, Array1<f64>)> = head
            .iter()
            .zip(&z)
            .map(|(p, z)| (z.dot(&p.a.slice(s![..proj])), z.dot(&p.a.slice(s![proj..]))))
            .collect();
        let mut agg = Array2::zeros((targets.len(), proj));
        let (mut logit, mut alpha, mut keep) = (Vec::new(), Vec::new(), Vec::new());
        let mut buf = Vec::new();
        for (r, &t) in targets.iter().enumerate() {
            let ti = local[t] as usize;
            for d in 1..=max_order {
                let slot = params.slot(d);
                let (src, dst) = &scores[slot];
                let neigh = index.get(t, d);
                if neigh.is_empty() {
                    continue;
                }
                let start = logit.len();
                for &k in neigh {
                    logit.push(src[ti] + dst[local[k as usize] as usize]);
                }
                buf.clear();
                buf.extend(logit[start..].iter().map(|&e| leaky_relu(e, params.leak)));
                nn::softmax_in_place(&mut buf);
                let mut acc = agg.row_mut(r);
                for (&k, &a) in neigh.iter().zip(&buf) {
                    let scale = if drop > 0.0 {
                        let rng = rng.as_deref_mut().expect("checked above");
                        if rng.random::<f64>() < drop {
                            0.0
                        } else {
                            1.0 / (1.0 - drop)
                        }
                    } else {
                        1.0
                    };
                    alpha.push(a);
                    keep.push(scale);
                    if scale != 0.0 {
                        acc.scaled_add(a * scale, &z[slot].row(local[k as usize] as usize));
                    }
                }
            }
            out.slice_mut(s![r, hi * proj..(hi + 1) * proj])
                .assign(&agg.row(r).mapv(elu));
        }
        head_caches.push(HeadCache {
            z,
            agg,
            logit,
            alpha,
            keep,
        });
    }
    Ok((
        out,
        MogatCache {
            targets: targets.to_vec(),
            touched,
            local,
            h,
            heads: head_caches,
        },
    ))
}

/// Gradients of a forward pass: parameter gradients are accumulated into
/// `grad`; feature gradients are returned as `(touched node ids, rows)`.
pub fn backward(
    index: &NeighborhoodIndex,
    params: &MogatParams,
    cache: &MogatCache,
    d_out: &Array2<f64>,
    grad: &mut MogatParams,
) -> (Vec<usize>, Array2<f64>) {
    let proj = params.proj_dim();
    let max_order = params.max_order;
    let local = &cache.local;
    let mut dh = Array2::zeros(cache.h.dim());
    for (hi, (head, hc)) in params.heads.iter().zip(&cache.heads).enumerate() {
        let slots = head.len();
        let mut dz: Vec<Array2<f64>> = (0..slots).map(|_| Array2::zeros(hc.z[0].dim())).collect();
        let mut ds_src: Vec<Array1<f64>> = (0..slots).map(|_| Array1::zeros(cache.touched.len())).collect();
        let mut ds_dst = ds_src.clone();
        let mut pos = 0;
        let (mut dalpha, mut de) = (Vec::new(), Vec::new());
        for (r, &t) in cache.targets.iter().enumerate() {
            let ti = local[t] as usize;
            let dagg: Array1<f64> = d_out
                .slice(s![r, hi * proj..(hi + 1) * proj])
                .iter()
                .zip(hc.agg.row(r))
                .map(|(&g, &x)| g * elu_grad(x))
                .collect();
            for d in 1..=max_order {
                let slot = params.slot(d);
                let neigh = index.get(t, d);
                let m = neigh.len();
                if m == 0 {
                    continue;
                }
                let alpha = &hc.alpha[pos..pos + m];
                let keep = &hc.keep[pos..pos + m];
                let logit = &hc.logit[pos..pos + m];
                dalpha.clear();
                for ((&k, &a), &kp) in neigh.iter().zip(alpha).zip(keep) {
                    let kl = local[k as usize] as usize;
                    if kp != 0.0 {
                        dalpha.push(dagg.dot(&hc.z[slot].row(kl)) * kp);
                        dz[slot].row_mut(kl).scaled_add(a * kp, &dagg);
                    } else {
                        dalpha.push(0.0);
                    }
                }
                de.resize(m, 0.0);
                nn::softmax_backward(alpha, &dalpha, &mut de);
                for ((&k, &g), &e) in neigh.iter().zip(&de).zip(logit) {
                    let dl = g * leaky_relu_grad(e, params.leak);
                    ds_src[slot][ti] += dl;
                    ds_dst[slot][local[k as usize] as usize] += dl;
                }
                pos += m;
            }
        }
        for slot in 0..slots {
            let p = &head[slot];
            let g = &mut grad.heads[hi][slot];
            let z = &hc.z[slot];
            let (a_src, a_dst) = (p.a.slice(s![..proj]), p.a.slice(s![proj..]));
            let mut dzs = std::mem::take(&mut dz[slot]);
            for i in 0..dzs.nrows() {
                let (gs, gd) = (ds_src[slot][i], ds_dst[slot][i]);
                if gs != 0.0 || gd != 0.0 {
                    let mut row = dzs.row_mut(i);
                    row.scaled_add(gs, &a_src);
                    row.scaled_add(gd, &a_dst);
                }
            }
            let (mut ga_src, mut ga_dst) = g.a.view_mut().split_at(Axis(0), proj);
            ga_src += &z.t().dot(&ds_src[slot]);
            ga_dst += &z.t().dot(&ds_dst[slot]);
            g.w += &cache.h.t().dot(&dzs);
            dh += &dzs.dot(&p.w.t());
        }
    }
    (cache.touched.clone(), dh)
}

/// Per-head output over every node, evaluation mode.
pub fn aggregate_multi_order(
    index: &NeighborhoodIndex,
    features: &Array2<f64>,
    params: &MogatParams,
    head: usize,
) -> Result<Array2<f64>> {
    if head >= params.num_heads() {
        return Err(Error::Index(format!("head {head} out of range")));
    }
    let full = multi_head_forward(index, features, params)?;
    let p = params.proj_dim();
    Ok(full.slice(s![.., head * p..(head + 1) * p]).to_owned())
}

/// Concatenated head outputs for every node, evaluation mode.
pub fn multi_head_forward(
    index: &NeighborhoodIndex,
    features: &Array2<f64>,
    params: &MogatParams,
) -> Result<Array2<f64>> {
    let targets: Vec<usize> = (0..index.num_nodes()).collect();
    encode(index, features, params, &targets)
}

/// Evaluation-mode outputs for `targets`, computed in parallel chunks.
pub fn encode(
    index: &NeighborhoodIndex,
    features: &Array2<f64>,
    params: &MogatParams,
    targets: &[usize],
) -> Result<Array2<f64>> {
    use rayon::prelude::*;
    const CHUNK: usize = 256;
    let parts = targets
        .par_chunks(CHUNK)
        .map(|chunk| forward(index, features, params, chunk, Mode::Eval, None).map(|(o, _)| o))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Array2::zeros((targets.len(), params.out_dim()));
    for (i, part) in parts.into_iter().enumerate() {
        let start = i * CHUNK;
        out.slice_mut(s![start..start + part.nrows(), ..]).assign(&part);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub node: usize,
    pub order: usize,
    pub head: usize,
    pub neighbor: usize,
    pub weight: f64,
}

/// Evaluation-mode attention weights for `nodes` at every order and head.
pub fn attention_report(
    index: &NeighborhoodIndex,
    features: &Array2<f64>,
    params: &MogatParams,
    nodes: &[usize],
) -> Result<Vec<AttentionRecord>> {
    let mut out = Vec::new();
    for &node in nodes {
        for order in 1..=params.max_order {
            for head in 0..params.num_heads() {
                let (ids, ws) = attention_weights(node, order, head, index, features, params)?;
                out.extend(ids.into_iter().zip(ws).map(|(neighbor, weight)| AttentionRecord {
                    node,
                    order,
                    head,
                    neighbor,
                    weight,
                }));
            }
        }
    }
    Ok(out)
}

pub fn write_attention_csv(records: &[AttentionRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("node,order,head,neighbor,weight\n");
    for r in records {
        let _ = writeln!(text, "{},{},{},{},{}", r.node, r.order, r.head, r.neighbor, r.weight);
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::HeterogeneousGraph;

    fn path3() -> NeighborhoodIndex {
        let g = HeterogeneousGraph::from_parts(3, vec![], [(0, 1), (1, 2)]).unwrap();
        NeighborhoodIndex::build(&g, 2).unwrap()
    }

    #[test]
    fn logits_zero_vector_and_identity() {
        let h = ndarray::array![0.3, -1.2, 2.0];
        let w = Array2::eye(3);
        assert_eq!(attention_logits(h.view(), h.view(), &w, &Array1::zeros(6)).unwrap(), 0.0);
        let mut a = Array1::zeros(6);
        a[0] = 1.0;
        let g = ndarray::array![5.0, 6.0, 7.0];
        assert_eq!(attention_logits(h.view(), g.view(), &w, &a).unwrap(), 0.3);
        assert!(matches!(
            attention_logits(h.view(), g.view(), &w, &Array1::zeros(5)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn singleton_and_symmetric_weights() {
        let idx = path3();
        let params = MogatParams::init(&MogatConfig::new(2, 2, 1, 2), 0).unwrap();
        let mut feats = Array2::zeros((3, 2));
        feats.row_mut(0).assign(&ndarray::array![0.5, 0.1]);
        feats.row_mut(2).assign(&ndarray::array![0.5, 0.1]);
        let (ids, w) = attention_weights(0, 2, 0, &idx, &feats, &params).unwrap();
        assert_eq!((ids, w), (vec![2], vec![1.0]));
        // Node 1 sees 0 and 2 (identical) plus itself.
        let (ids, w) = attention_weights(1, 1, 0, &idx, &feats, &params).unwrap();
        assert_eq!(ids, vec![0, 1, 2]);
        assert!((w[0] - w[2]).abs() < 1e-15);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (_, w) = attention_weights(1, 2, 0, &idx, &feats, &params).unwrap();
        assert!(w.is_empty());
    }

    #[test]
    fn self_loop_only_node_is_elu_of_projection() {
        let g = HeterogeneousGraph::from_parts(1, vec![], []).unwrap();
        let idx = NeighborhoodIndex::build(&g, 1).unwrap();
        let params = MogatParams::init(&MogatConfig::new(3, 2, 1, 1), 4).unwrap();
        let feats = ndarray::array![[0.2, -0.7, 1.1]];
        let out = multi_head_forward(&idx, &feats, &params).unwrap();
        let expect = feats.row(0).dot(&params.heads[0][0].w).mapv(elu);
        assert!(out.row(0).iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-14));
    }

    #[test]
    fn identical_heads_duplicate_output() {
        let idx = path3();
        let mut params = MogatParams::init(&MogatConfig::new(2, 3, 2, 2), 1).unwrap();
        params.heads[1] = params.heads[0].clone();
        let feats = ndarray::array![[0.1, 0.2], [0.3, -0.4], [1.0, 0.5]];
        let out = multi_head_forward(&idx, &feats, &params).unwrap();
        assert_eq!(out.ncols(), 6);
        assert_eq!(out.slice(s![.., ..3]), out.slice(s![.., 3..]));
        assert_eq!(aggregate_multi_order(&idx, &feats, &params, 0).unwrap(), out.slice(s![.., ..3]));
    }

    #[test]
    fn training_mode_requires_rng_only_with_dropout() {
        let idx = path3();
        let feats = Array2::ones((3, 2));
        let params = MogatParams::init(&MogatConfig::new(2, 2, 1, 2), 1).unwrap();
        assert!(forward(&idx, &feats, &params, &[0], Mode::Train, None).is_err());
        let mut r = rng::seeded(0);
        assert!(forward(&idx, &feats, &params, &[0], Mode::Train, Some(&mut r)).is_ok());
    }

    #[test]
    fn attention_csv_has_header_and_rows() {
        let idx = path3();
        let feats = Array2::ones((3, 2));
        let params = MogatParams::init(&MogatConfig::new(2, 2, 1, 2), 1).unwrap();
        let recs = attention_report(&idx, &feats, &params, &[1]).unwrap();
        assert_eq!(recs.len(), 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("att.csv");
        write_attention_csv(&recs, &path).unwrap();
        assert_eq!(fs::read_to_string(path).unwrap().lines().count(), 4);
    }
}

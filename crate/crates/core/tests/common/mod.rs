#![allow(dead_code)]

use ndarray::Array2;
use qosgraph::dataset::{AttributeTable, Interaction, InteractionSet};
use qosgraph::graph::{HeterogeneousGraph, NeighborhoodIndex};
use qosgraph::mogat::MogatParams;
use qosgraph::nn::ParamSet;
use qosgraph::training::{DataBundle, Graphs};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-3;

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + FD_STEP;
            let up = f(&x);
            x[i] = orig - FD_STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|)` over the whole vector, in the 2-norm.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn flatten<P: ParamSet>(p: &P) -> Vec<f64> {
    p.tensors().concat()
}

pub fn assign_flat<P: ParamSet>(p: &mut P, x: &[f64]) {
    let mut pos = 0;
    for t in p.tensors_mut() {
        let n = t.len();
        t.copy_from_slice(&x[pos..pos + n]);
        pos += n;
    }
    assert_eq!(pos, x.len());
}

/// Finite-difference gradient of `f` over every scalar of `p`.
pub fn numeric_param_grad<P: ParamSet + Clone>(p: &P, f: impl Fn(&P) -> f64) -> Vec<f64> {
    let mut work = p.clone();
    numeric_grad(&flatten(p), |x| {
        assign_flat(&mut work, x);
        f(&work)
    })
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || r.random_range(-1.0..1.0))
}

/// Random entity/attribute graph: `n_ent` entities, `n_attr` attribute
/// nodes, each entity linked to a random subset of attributes.
pub fn random_graph(n_ent: usize, n_attr: usize, p: f64, seed: u64) -> HeterogeneousGraph {
    let mut r = rng(seed);
    let labels = (0..n_attr).map(|k| ("attr".to_string(), format!("v{k}"))).collect();
    let mut edges = Vec::new();
    for e in 0..n_ent {
        for a in 0..n_attr {
            if r.random::<f64>() < p {
                edges.push((e, n_ent + a));
            }
        }
    }
    HeterogeneousGraph::from_parts(n_ent, labels, edges).unwrap()
}

/// All-pairs hop distances by Floyd-Warshall; `usize::MAX` when unreachable.
pub fn hop_distances(g: &HeterogeneousGraph) -> Vec<Vec<usize>> {
    let n = g.num_nodes();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for i in 0..n {
        d[i][i] = 0;
    }
    for &(a, b) in g.edges() {
        d[a][b] = 1;
        d[b][a] = 1;
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                if d[i][k] + d[k][j] < d[i][j] {
                    d[i][j] = d[i][k] + d[k][j];
                }
            }
        }
    }
    d.into_iter()
        .map(|row| row.into_iter().map(|v| if v >= inf { usize::MAX } else { v }).collect())
        .collect()
}

/// Neighbors at exact distance `order`, with the node itself at order 1.
pub fn oracle_neighborhood(dist: &[Vec<usize>], node: usize, order: usize) -> Vec<usize> {
    (0..dist.len())
        .filter(|&k| dist[node][k] == order || (order == 1 && k == node))
        .collect()
}

fn leaky(x: f64, leak: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        leak * x
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

/// Evaluation-mode attention output for every node, written with plain
/// loops over the distance table.
pub fn oracle_mogat(g: &HeterogeneousGraph, h: &Array2<f64>, p: &MogatParams) -> Array2<f64> {
    let n = g.num_nodes();
    let dist = hop_distances(g);
    let proj = p.heads[0][0].w.ncols();
    let in_dim = h.ncols();
    let mut out = Array2::zeros((n, proj * p.heads.len()));
    for (hi, head) in p.heads.iter().enumerate() {
        for i in 0..n {
            let mut agg = vec![0.0; proj];
            for d in 1..=p.max_order {
                let op = if p.shared_orders { &head[0] } else { &head[d - 1] };
                let project = |k: usize| -> Vec<f64> {
                    (0..proj)
                        .map(|c| (0..in_dim).map(|r| h[(k, r)] * op.w[(r, c)]).sum())
                        .collect()
                };
                let zi = project(i);
                let neigh = oracle_neighborhood(&dist, i, d);
                if neigh.is_empty() {
                    continue;
                }
                let zs: Vec<Vec<f64>> = neigh.iter().map(|&k| project(k)).collect();
                let scores: Vec<f64> = zs
                    .iter()
                    .map(|zk| {
                        let mut e = 0.0;
                        for c in 0..proj {
                            e += op.a[c] * zi[c] + op.a[proj + c] * zk[c];
                        }
                        leaky(e, p.leak)
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for (zk, s) in zs.iter().zip(&scores) {
                    let alpha = (s - m).exp() / total;
                    for c in 0..proj {
                        agg[c] += alpha * zk[c];
                    }
                }
            }
            for c in 0..proj {
                out[(i, hi * proj + c)] = elu(agg[c]);
            }
        }
    }
    out
}

/// Four users and four services with two attributes each and a dense
/// low-rank QoS pattern.
pub fn toy_bundle(seed: u64) -> (DataBundle, Vec<Interaction>) {
    let user_attrs = AttributeTable {
        columns: vec!["Country".into(), "AS".into()],
        rows: vec![
            vec!["US".into(), "AS1".into()],
            vec!["US".into(), "AS2".into()],
            vec!["DE".into(), "AS2".into()],
            vec!["DE".into(), "AS3".into()],
        ],
    };
    let service_attrs = AttributeTable {
        columns: vec!["Country".into(), "Provider".into()],
        rows: vec![
            vec!["US".into(), "P1".into()],
            vec!["CN".into(), "P1".into()],
            vec!["CN".into(), "P2".into()],
            vec!["US".into(), "P2".into()],
        ],
    };
    let ug = qosgraph::graph::build_heterogeneous_graph(4, &user_attrs, &user_attrs.columns.clone()).unwrap();
    let sg = qosgraph::graph::build_heterogeneous_graph(4, &service_attrs, &service_attrs.columns.clone()).unwrap();
    let a = [0.4, 1.0, 1.6, 0.7];
    let b = [1.2, 0.5, 0.9, 1.5];
    let mut all = Vec::new();
    for u in 0..4 {
        for s in 0..4 {
            all.push(Interaction {
                user: u,
                service: s,
                value: a[u] * b[s],
            });
        }
    }
    let mut r = rng(seed);
    let val_idx = [r.random_range(0..16usize), (r.random_range(0..16usize) + 7) % 16];
    let (mut fit, mut val) = (Vec::new(), Vec::new());
    for (i, t) in all.iter().enumerate() {
        if val_idx.contains(&i) && val.len() < 2 {
            val.push(*t);
        } else {
            fit.push(*t);
        }
    }
    if val.is_empty() {
        val.push(fit.pop().unwrap());
    }
    let bundle = DataBundle {
        fit: InteractionSet::new(fit, 0.875),
        val: InteractionSet::new(val.clone(), 0.125),
        test: InteractionSet::new(val, 0.125),
        graphs: Graphs {
            users: NeighborhoodIndex::build(&ug, 2).unwrap(),
            services: NeighborhoodIndex::build(&sg, 2).unwrap(),
            num_users: 4,
            num_services: 4,
        },
    };
    (bundle, all)
}

/// Write a small triple CSV plus user and service attribute files whose QoS
/// values depend on the attributes, and return a config pointing at them.
pub fn write_synthetic_dataset(dir: &std::path::Path, users: usize, services: usize, seed: u64) -> qosgraph::experiment::ExperimentConfig {
    use std::fmt::Write;
    let mut r = rng(seed);
    let user_region: Vec<usize> = (0..users).map(|_| r.random_range(0..3)).collect();
    let service_region: Vec<usize> = (0..services).map(|_| r.random_range(0..3)).collect();
    let service_provider: Vec<usize> = (0..services).map(|_| r.random_range(0..4)).collect();
    let mut csv = String::from("user,service,value\n");
    for u in 0..users {
        for s in 0..services {
            if r.random::<f64>() < 0.85 {
                let base = if user_region[u] == service_region[s] { 0.3 } else { 1.2 };
                let v = base + 0.2 * service_provider[s] as f64 + 0.05 * r.random::<f64>();
                let _ = writeln!(csv, "{u},{s},{v:.4}");
            }
        }
    }
    let mut ua = String::from("id\tCountry\tAS\n");
    for u in 0..users {
        let _ = writeln!(ua, "{u}\tR{}\tAS{}", user_region[u], u % 4);
    }
    let mut sa = String::from("id\tCountry\tProvider\n");
    for s in 0..services {
        let _ = writeln!(sa, "{s}\tR{}\tP{}", service_region[s], service_provider[s]);
    }
    std::fs::write(dir.join("qos.csv"), csv).unwrap();
    std::fs::write(dir.join("users.tsv"), ua).unwrap();
    std::fs::write(dir.join("services.tsv"), sa).unwrap();
    let mut cfg = qosgraph::experiment::ExperimentConfig::default();
    cfg.dataset = dir.join("qos.csv");
    cfg.format = qosgraph::dataset::MatrixFormat::TripleCsv;
    cfg.user_attributes = Some(dir.join("users.tsv"));
    cfg.service_attributes = Some(dir.join("services.tsv"));
    cfg.user_schema = vec!["Country".into(), "AS".into()];
    cfg.service_schema = vec!["Country".into(), "Provider".into()];
    cfg.out = dir.join("out");
    cfg
}

mod common;

use common::*;
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use qosgraph::graph::{HeterogeneousGraph, NeighborhoodIndex};
use qosgraph::mogat::{self, MogatConfig, MogatParams};
use qosgraph::nn::Mode;
use rand::Rng;

const ORACLE_TOL: f64 = 1e-6;

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn vectorized_forward_matches_loop_oracle_on_twenty_graphs() {
    let mut r = rng(2024);
    for case in 0..20 {
        let n_ent = r.random_range(2..=14);
        let n_attr = r.random_range(1..=(20 - n_ent).min(6));
        let g = random_graph(n_ent, n_attr, r.random_range(0.15..0.6), 100 + case);
        assert!(g.num_nodes() <= 20);
        let order = r.random_range(1..=3);
        let heads = r.random_range(1..=3);
        let mut cfg = MogatConfig::new(5, 4, heads, order);
        cfg.shared_orders = case % 5 == 4;
        let p = MogatParams::init(&cfg, case).unwrap();
        let h = random_matrix(g.num_nodes(), 5, &mut r);
        let index = NeighborhoodIndex::build(&g, order).unwrap();
        let fast = mogat::multi_head_forward(&index, &h, &p).unwrap();
        let slow = oracle_mogat(&g, &h, &p);
        let err = max_abs_diff(&fast, &slow);
        assert!(err <= ORACLE_TOL, "case {case}: max diff {err}");
    }
}

#[test]
fn restricted_forward_equals_full_forward_gather() {
    let g = random_graph(10, 5, 0.35, 9);
    let index = NeighborhoodIndex::build(&g, 2).unwrap();
    let p = MogatParams::init(&MogatConfig::new(6, 3, 2, 2), 1).unwrap();
    let h = random_matrix(g.num_nodes(), 6, &mut rng(3));
    let full = mogat::multi_head_forward(&index, &h, &p).unwrap();
    let targets = [7, 2, 2, 11];
    let (part, _) = mogat::forward(&index, &h, &p, &targets, Mode::Eval, None).unwrap();
    assert_eq!(part, full.select(Axis(0), &targets));
}

fn permuted(g: &HeterogeneousGraph, perm: &[usize]) -> HeterogeneousGraph {
    // Entities and attributes are permuted within their own ranges.
    let labels = (0..g.num_attribute_nodes())
        .map(|k| g.attr_label(g.num_entity_nodes() + k).unwrap().clone())
        .collect();
    let edges = g.edges().iter().map(|&(a, b)| (perm[a], perm[b]));
    HeterogeneousGraph::from_parts(g.num_entity_nodes(), labels, edges).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn permutation_equivariance(seed in 0u64..10_000, n_ent in 2usize..9, n_attr in 1usize..6) {
        let g = random_graph(n_ent, n_attr, 0.4, seed);
        let n = g.num_nodes();
        let mut r = rng(seed ^ 0xABCD);
        let mut perm: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        perm[..n_ent].shuffle(&mut r);
        perm[n_ent..].shuffle(&mut r);
        let g2 = permuted(&g, &perm);
        let p = MogatParams::init(&MogatConfig::new(4, 3, 2, 2), seed).unwrap();
        let h = random_matrix(n, 4, &mut r);
        let mut h2 = Array2::zeros(h.dim());
        for i in 0..n {
            h2.row_mut(perm[i]).assign(&h.row(i));
        }
        let out = mogat::multi_head_forward(&NeighborhoodIndex::build(&g, 2).unwrap(), &h, &p).unwrap();
        let out2 = mogat::multi_head_forward(&NeighborhoodIndex::build(&g2, 2).unwrap(), &h2, &p).unwrap();
        for i in 0..n {
            for c in 0..out.ncols() {
                prop_assert!((out[(i, c)] - out2[(perm[i], c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn features_beyond_order_have_no_effect(seed in 0u64..10_000, order in 1usize..4) {
        let g = random_graph(8, 4, 0.3, seed);
        let dist = hop_distances(&g);
        let index = NeighborhoodIndex::build(&g, order).unwrap();
        let p = MogatParams::init(&MogatConfig::new(3, 3, 2, order), seed).unwrap();
        let mut r = rng(seed);
        let h = random_matrix(g.num_nodes(), 3, &mut r);
        let base = mogat::multi_head_forward(&index, &h, &p).unwrap();
        let far: Vec<usize> = (0..g.num_nodes()).filter(|&k| dist[0][k] > order).collect();
        let mut h2 = h.clone();
        for &k in &far {
            h2.row_mut(k).mapv_inplace(|v| v * -7.0 + 3.0);
        }
        let moved = mogat::multi_head_forward(&index, &h2, &p).unwrap();
        prop_assert_eq!(base.row(0), moved.row(0));
    }

    #[test]
    fn attention_rows_are_stochastic(seed in 0u64..10_000, order in 1usize..4, head in 0usize..2) {
        let g = random_graph(7, 4, 0.45, seed);
        let index = NeighborhoodIndex::build(&g, order).unwrap();
        let p = MogatParams::init(&MogatConfig::new(4, 2, 2, order), seed).unwrap();
        let h = random_matrix(g.num_nodes(), 4, &mut rng(seed + 1));
        for node in 0..g.num_nodes() {
            for d in 1..=order {
                let (neigh, w) = mogat::attention_weights(node, d, head, &index, &h, &p).unwrap();
                prop_assert_eq!(neigh.len(), w.len());
                if !w.is_empty() {
                    prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    prop_assert!(w.iter().all(|&a| a > 0.0));
                }
            }
        }
    }

    #[test]
    fn index_matches_distance_oracle(seed in 0u64..10_000, n_ent in 1usize..10, n_attr in 0usize..6) {
        let g = random_graph(n_ent, n_attr, 0.35, seed);
        let dist = hop_distances(&g);
        let index = NeighborhoodIndex::build(&g, 4).unwrap();
        for node in 0..g.num_nodes() {
            for d in 1..=4 {
                let got: Vec<usize> = index.get(node, d).iter().map(|&k| k as usize).collect();
                prop_assert_eq!(&got, &oracle_neighborhood(&dist, node, d));
                prop_assert_eq!(&got, &qosgraph::graph::neighborhood(&g, node, d).unwrap());
            }
        }
    }
}

#[test]
fn shared_orders_use_one_parameter_set() {
    let mut cfg = MogatConfig::new(4, 4, 2, 3);
    cfg.shared_orders = true;
    let p = MogatParams::init(&cfg, 0).unwrap();
    assert!(p.heads.iter().all(|h| h.len() == 1));
    assert_eq!(p.order(1, 3), p.order(1, 1));
}

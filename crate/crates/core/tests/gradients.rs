mod common;

use common::*;
use ndarray::{Array1, Array2};
use qosgraph::advnet::{self, DiscriminatorParams, PredictorParams};
use qosgraph::dataset::Interaction;
use qosgraph::graph::NeighborhoodIndex;
use qosgraph::mogat::{self, MogatConfig, MogatParams};
use qosgraph::nn::{Mode, ParamSet};
use qosgraph::training::{self, QosModel, TrainingConfig};

fn weighted_sum(a: &Array2<f64>, c: &Array2<f64>) -> f64 {
    (a * c).sum()
}

fn check(name: &str, analytic: &[f64], numeric: &[f64]) {
    let err = rel_error(analytic, numeric);
    assert!(err <= FD_TOL, "{name}: relative error {err:.3e}");
    assert!(numeric.iter().any(|v| v.abs() > 1e-8), "{name}: numeric gradient is identically zero");
}

fn mogat_setup(seed: u64) -> (NeighborhoodIndex, Array2<f64>, MogatParams, Vec<usize>, Array2<f64>) {
    let g = random_graph(6, 4, 0.45, seed);
    let index = NeighborhoodIndex::build(&g, 2).unwrap();
    let mut cfg = MogatConfig::new(3, 3, 2, 2);
    cfg.dropout_rate = 0.3;
    let p = MogatParams::init(&cfg, seed).unwrap();
    let mut r = rng(seed + 7);
    let h = random_matrix(g.num_nodes(), 3, &mut r);
    let targets = vec![0, 3, 5, 3];
    let c = random_matrix(targets.len(), p.out_dim(), &mut r);
    (index, h, p, targets, c)
}

#[test]
fn attention_parameter_gradients_with_dropout() {
    for seed in 0..4 {
        let (index, h, p, targets, c) = mogat_setup(seed);
        let drop_rng = rng(seed + 100);
        let loss = |p: &MogatParams| {
            let mut r = drop_rng.clone();
            let (out, _) = mogat::forward(&index, &h, p, &targets, Mode::Train, Some(&mut r)).unwrap();
            weighted_sum(&out, &c)
        };
        let mut r = drop_rng.clone();
        let (_, cache) = mogat::forward(&index, &h, &p, &targets, Mode::Train, Some(&mut r)).unwrap();
        let mut grad = p.zeros_like();
        mogat::backward(&index, &p, &cache, &c, &mut grad);
        check("attention params", &flatten(&grad), &numeric_param_grad(&p, loss));
    }
}

#[test]
fn attention_feature_gradients() {
    for seed in 0..4 {
        let (index, h, p, targets, c) = mogat_setup(seed + 10);
        let (_, cache) = mogat::forward(&index, &h, &p, &targets, Mode::Eval, None).unwrap();
        let mut grad = p.zeros_like();
        let (ids, rows) = mogat::backward(&index, &p, &cache, &c, &mut grad);
        let mut full = Array2::zeros(h.dim());
        qosgraph::embedding::scatter_add(&mut full, &ids, &rows);
        let numeric = numeric_grad(h.as_slice().unwrap(), |x| {
            let hx = Array2::from_shape_vec(h.dim(), x.to_vec()).unwrap();
            let (out, _) = mogat::forward(&index, &hx, &p, &targets, Mode::Eval, None).unwrap();
            weighted_sum(&out, &c)
        });
        check("attention features", full.as_slice().unwrap(), &numeric);
    }
}

#[test]
fn predictor_gradients() {
    let mut r = rng(5);
    let p = PredictorParams::init(6, 8, 3).unwrap();
    let x = random_matrix(5, 6, &mut r);
    let c = Array1::from_iter((0..5).map(|i| 0.3 * i as f64 - 0.5));
    let (_, cache) = p.forward(&x).unwrap();
    let mut grad = p.zeros_like();
    let dx = p.backward(&cache, &c, &mut grad);
    let loss = |p: &PredictorParams| p.forward(&x).unwrap().0.dot(&c);
    check("predictor params", &flatten(&grad), &numeric_param_grad(&p, loss));
    let numeric = numeric_grad(x.as_slice().unwrap(), |v| {
        let xv = Array2::from_shape_vec(x.dim(), v.to_vec()).unwrap();
        p.forward(&xv).unwrap().0.dot(&c)
    });
    check("predictor input", dx.as_slice().unwrap(), &numeric);
}

#[test]
fn discriminator_gradients_both_modes() {
    let mut d = DiscriminatorParams::init(4, 0.2, 9).unwrap();
    let preds = Array1::from(vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.4]);
    // Non-trivial running statistics for the eval path.
    advnet::discriminate(&preds, &mut d, Mode::Train).unwrap();
    let c = Array1::from(vec![1.0, -0.5, 0.25, 0.7, -1.1, 0.4]);
    for mode in [Mode::Train, Mode::Eval] {
        let (_, cache, _) = d.forward(&preds, mode).unwrap();
        let mut grad = d.zeros_like();
        let dx = d.backward(&cache, &c, &mut grad);
        let loss = |d: &DiscriminatorParams| d.forward(&preds, mode).unwrap().0.dot(&c);
        check("discriminator params", &flatten(&grad), &numeric_param_grad(&d, loss));
        let numeric = numeric_grad(preds.as_slice().unwrap(), |v| {
            d.forward(&Array1::from(v.to_vec()), mode).unwrap().0.dot(&c)
        });
        check("discriminator input", dx.as_slice().unwrap(), &numeric);
    }
}

#[test]
fn gumbel_softmax_gradient_through_offset() {
    let mut r = rng(11);
    for &tau in &[0.3, 1.0, 4.0] {
        let z = random_matrix(4, 5, &mut r);
        let g = random_matrix(4, 5, &mut r);
        // The plain mean of F is constant; a weighted sum has a real gradient.
        let c = random_matrix(4, 5, &mut r);
        let f = advnet::gumbel_softmax(&z, &g, tau).unwrap();
        let analytic = advnet::gumbel_softmax_backward(&f, &c, tau);
        let numeric = numeric_grad(z.as_slice().unwrap(), |v| {
            let zv = Array2::from_shape_vec(z.dim(), v.to_vec()).unwrap();
            weighted_sum(&advnet::gumbel_softmax(&zv, &g, tau).unwrap(), &c)
        });
        check("gumbel softmax", analytic.as_slice().unwrap(), &numeric);
    }
}

#[test]
fn mean_of_gumbel_output_has_zero_gradient() {
    let mut r = rng(12);
    let z = random_matrix(3, 4, &mut r);
    let g = random_matrix(3, 4, &mut r);
    let f = advnet::gumbel_softmax(&z, &g, 0.5).unwrap();
    let ones = Array2::from_elem(f.dim(), 1.0 / f.len() as f64);
    let analytic = advnet::gumbel_softmax_backward(&f, &ones, 0.5);
    assert!(analytic.iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn loss_gradients() {
    let x = [0.7, -2.0, 35.0, -40.0, 0.0];
    let y = [1.0, 0.0, 0.0, 1.0, 1.0];
    let numeric = numeric_grad(&x, |v| training::bce_with_logits(v, &y).unwrap());
    check("bce", training::bce_with_logits_grad(&x, &y).as_slice().unwrap(), &numeric);
    let t = [0.1, 0.5, -0.3, 2.0, 1.0];
    let numeric = numeric_grad(&x, |v| training::mse(v, &t).unwrap());
    check("mse", training::mse_grad(&x, &t).as_slice().unwrap(), &numeric);
}

fn small_config(adversarial: bool, fool_fakes: bool) -> TrainingConfig {
    TrainingConfig {
        embed_dim: 3,
        heads: 2,
        order: 2,
        predictor_hidden: 6,
        discriminator_hidden: 4,
        attention_dropout: 0.2,
        adversarial_on: adversarial,
        fool_fakes,
        lambda: 0.4,
        ..TrainingConfig::default()
    }
}

#[test]
fn generator_end_to_end_gradients() {
    let (bundle, all) = toy_bundle(3);
    let graphs = &bundle.graphs;
    let batch: Vec<Interaction> = all.iter().step_by(3).copied().collect();
    for (adv, fool) in [(false, false), (true, false), (true, true)] {
        let cfg = small_config(adv, fool);
        let model = QosModel::init(&cfg, graphs.users.num_nodes(), graphs.services.num_nodes()).unwrap();
        let base = rng(77);
        let loss_of = |g: &training::Generator| {
            let fwd = training::forward_batch(g, graphs, &cfg, &batch, &mut base.clone()).unwrap();
            training::generator_gradients(g, &model.discriminator, graphs, &cfg, &fwd).unwrap()
        };
        let (_, grad) = loss_of(&model.generator);
        assert_eq!(grad.num_params(), model.generator.num_params());
        let numeric = numeric_param_grad(&model.generator, |g| loss_of(g).0);
        check("generator", &flatten(&grad), &numeric);
    }
}

#[test]
fn discriminator_loss_gradient_from_batch() {
    let (bundle, all) = toy_bundle(4);
    let graphs = &bundle.graphs;
    let cfg = small_config(true, false);
    let model = QosModel::init(&cfg, graphs.users.num_nodes(), graphs.services.num_nodes()).unwrap();
    let fwd = training::forward_batch(&model.generator, graphs, &cfg, &all[..6], &mut rng(1)).unwrap();
    let (_, grad, stats) = training::discriminator_gradients(&model.discriminator, &fwd).unwrap();
    assert_eq!(stats.len(), 2);
    let numeric = numeric_param_grad(&model.discriminator, |d| {
        training::discriminator_gradients(d, &fwd).unwrap().0
    });
    check("discriminator loss", &flatten(&grad), &numeric);
}

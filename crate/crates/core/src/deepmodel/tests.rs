use super::*;
use crate::adcore::check_param_gradients;

fn spec(rule: Rule, dims: &[usize], m: usize, s: usize) -> ModelSpec {
    ModelSpec {
        rule,
        dims: dims.to_vec(),
        inducing: vec![m; dims.len() - 1],
        samples: s,
        likelihood: LikelihoodKind::Gaussian,
        inference_fn: if rule.is_amortized() { InferenceFn::AffineMlp } else { InferenceFn::Global },
        full_covariance: false,
        beta_reg: 1.0,
        init_noise_var: 0.1,
        hermite_points: 20,
    }
}

fn toy_data(n: usize, d: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = Rng::new(seed, 99);
    let x = rng.normal_tensor(vec![n, d]);
    let y = Tensor::vector((0..n).map(|i| (x.data()[i * d] * 1.3).sin() + 0.1 * rng.normal()).collect());
    (x, y)
}

fn model(spec: ModelSpec, x: &Tensor, seed: u64) -> DgpModel {
    DgpModel::new(spec, x, &mut Rng::new(seed, 1)).unwrap()
}

/// Perturbs every parameter so that gradients are generic.
fn jiggle(model: &mut DgpModel, seed: u64) {
    let mut rng = Rng::new(seed, 7);
    let flat: Vec<f64> = model.params.to_flat().iter().map(|v| v + 0.1 * rng.normal()).collect();
    model.params.set_flat(&flat);
}

fn fixed_noise(dims: &[usize], s: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = Rng::new(seed, 3);
    dims[1..dims.len() - 1].iter().map(|&d| rng.normal_tensor(vec![s, d])).collect()
}

#[test]
fn objective_gradients_pass_finite_differences_for_every_rule() {
    let dims = [2, 2, 1];
    let (x, y) = toy_data(5, 2, 11);
    let noise = fixed_noise(&dims, 3, 5);
    for rule in [Rule::AR1, Rule::AR2, Rule::AR2P, Rule::AR2PP, Rule::DS, Rule::DSPP] {
        let mut m = model(spec(rule, &dims, 2, 3), &x, 2);
        jiggle(&mut m, 4);
        let check = check_param_gradients(
            &m.params,
            |tape, vars| m.loss(vars, tape.constant(x.clone()), &y, 5, 3, Noise::Fixed(&noise)),
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{rule:?}: {check:?}");
    }
}

#[test]
fn probit_objective_gradients_pass_finite_differences() {
    let dims = [2, 2, 1];
    let (x, _) = toy_data(5, 2, 12);
    let y = Tensor::vector(vec![1.0, 0.0, 1.0, 1.0, 0.0]);
    for rule in [Rule::AR2, Rule::AR2P] {
        let mut sp = spec(rule, &dims, 2, 2);
        sp.likelihood = LikelihoodKind::BernoulliProbit;
        let mut m = model(sp, &x, 3);
        jiggle(&mut m, 8);
        let noise = fixed_noise(&dims, 2, 1);
        let check = check_param_gradients(
            &m.params,
            |tape, vars| m.elbo(vars, tape.constant(x.clone()), &y, 5, 2, Noise::Fixed(&noise)),
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_error < 1e-4, "{rule:?}: {check:?}");
    }
}

#[test]
fn quadrature_paths_match_sampling_with_the_same_draws() {
    let dims = [2, 3, 2, 1];
    let s = 4;
    let (x, _) = toy_data(6, 2, 13);
    let ar2 = model(spec(Rule::AR2, &dims, 3, s), &x, 21);
    let mut ar2p = model(spec(Rule::AR2P, &dims, 3, s), &x, 21);
    let eps: Vec<Tensor> = ar2p.xi.iter().map(|&id| ar2p.params.get(id).clone()).collect();
    for (&id, e) in ar2p.xi.clone().iter().zip(&eps) {
        ar2p.params.set(id, e.clone());
    }
    let tape = Tape::new();
    let (va, vp) = (ar2.params.bind(&tape), ar2p.params.bind(&tape));
    let xa = tape.constant(x.clone());
    let pa = ar2.forward(&va, xa, s, Noise::Fixed(&eps)).unwrap();
    let pp = ar2p.forward(&vp, xa, s, Noise::Fixed(&[])).unwrap();
    for (a, p) in pa.layers.iter().zip(&pp.layers) {
        assert!(a.mean.value().max_abs_diff(&p.mean.value()) < 1e-12);
        assert!(a.var.value().max_abs_diff(&p.var.value()) < 1e-12);
        assert!(a.kl.value().max_abs_diff(&p.kl.value()) < 1e-12);
    }
}

#[test]
fn quadrature_prediction_is_deterministic() {
    let dims = [2, 2, 1];
    let (x, _) = toy_data(7, 2, 14);
    let m = model(spec(Rule::AR2P, &dims, 3, 5), &x, 1);
    let a = m.predict(&x, 32, &mut Rng::new(1, 6)).unwrap();
    let b = m.predict(&x, 32, &mut Rng::new(2, 6)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.components(), 5);
    assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(a.vars.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn single_layer_models_predict_one_gaussian() {
    let (x, y) = toy_data(5, 2, 15);
    for rule in [Rule::AR1, Rule::AR2, Rule::AR2P, Rule::DS] {
        let m = model(spec(rule, &[2, 1], 3, 4), &x, 2);
        let p = m.predict(&x, 8, &mut Rng::new(0, 6)).unwrap();
        assert_eq!(p.components(), 1, "{rule:?}");
        assert_eq!(p.weights, vec![1.0]);
        // S does not enter a single layer
        let tape = Tape::new();
        let vars = m.params.bind(&tape);
        let xv = tape.constant(x.clone());
        let mut r1 = Rng::new(0, 3);
        let mut r2 = Rng::new(9, 3);
        let a = m.elbo(&vars, xv, &y, 5, 1, Noise::Sample(&mut r1)).unwrap().item();
        let b = m.elbo(&vars, xv, &y, 5, 7, Noise::Sample(&mut r2)).unwrap().item();
        assert_eq!(a, b);
    }
}

#[test]
fn single_layer_amortized_elbo_equals_shallow_layer() {
    let (x, y) = toy_data(6, 2, 16);
    let m = model(spec(Rule::AR1, &[2, 1], 3, 1), &x, 4);
    let tape = Tape::new();
    let vars = m.params.bind(&tape);
    let xv = tape.constant(x.clone());
    let deep = m.elbo(&vars, xv, &y, 6, 3, Noise::Fixed(&[])).unwrap().item();
    let shallow = crate::layers::shallow_elbo(xv, &y, &m.layers[0], &vars, m.likelihood(&vars), 6).unwrap().item();
    assert!((deep + shallow).abs() < 1e-10 * shallow.abs().max(1.0));
}

#[test]
fn per_path_kl_matches_mean_input_kl_without_spread() {
    let dims = [2, 3, 2, 1];
    let s = 5;
    let (x, _) = toy_data(4, 2, 17);
    let zero: Vec<Tensor> = dims[1..3].iter().map(|&d| Tensor::zeros(vec![s, d])).collect();
    let ar1 = model(spec(Rule::AR1, &dims, 3, s), &x, 8);
    let ar2 = model(spec(Rule::AR2, &dims, 3, s), &x, 8);
    let tape = Tape::new();
    let (v1, v2) = (ar1.params.bind(&tape), ar2.params.bind(&tape));
    let xv = tape.constant(x.clone());
    let p1 = ar1.forward(&v1, xv, s, Noise::Fixed(&zero)).unwrap();
    let p2 = ar2.forward(&v2, xv, s, Noise::Fixed(&zero)).unwrap();
    let k1 = p1.kl_term(true).item();
    let k2 = p2.kl_term(true).item();
    assert!((k1 - k2).abs() < 1e-12 * k2.abs().max(1.0), "{k1} vs {k2}");
}

#[test]
fn first_layer_always_sees_raw_inputs() {
    let dims = [2, 2, 2, 1];
    let (x, _) = toy_data(3, 2, 18);
    for rule in [Rule::AR1, Rule::AR2, Rule::AR2P, Rule::AR2PP] {
        let m = model(spec(rule, &dims, 2, 3), &x, 1);
        let tape = Tape::new();
        let vars = m.params.bind(&tape);
        let pass = m.forward(&vars, tape.constant(x.clone()), 3, Noise::Sample(&mut Rng::new(0, 3))).unwrap();
        assert_eq!(*pass.amortizer_inputs[0].value(), x);
        assert_eq!(pass.amortizer_inputs.len(), 3);
    }
}

#[test]
fn second_layer_mean_input_is_the_first_layer_mean() {
    let dims = [2, 3, 1];
    let (x, _) = toy_data(4, 2, 19);
    let m = model(spec(Rule::AR2, &dims, 2, 6), &x, 1);
    let tape = Tape::new();
    let vars = m.params.bind(&tape);
    let pass = m.forward(&vars, tape.constant(x.clone()), 6, Noise::Sample(&mut Rng::new(0, 3))).unwrap();
    let m1 = pass.layers[0].mean.value().as_ref().clone().reshape(vec![4, 3]);
    assert_eq!(*pass.amortizer_inputs[1].value(), m1);
}

#[test]
fn data_term_scales_with_dataset_size_but_kl_does_not() {
    let dims = [2, 2, 1];
    let (x, y) = toy_data(5, 2, 20);
    let noise = fixed_noise(&dims, 2, 0);
    for rule in [Rule::AR2, Rule::DS] {
        let m = model(spec(rule, &dims, 2, 2), &x, 5);
        let tape = Tape::new();
        let vars = m.params.bind(&tape);
        let xv = tape.constant(x.clone());
        let l1 = m.elbo(&vars, xv, &y, 50, 2, Noise::Fixed(&noise)).unwrap().item();
        let l2 = m.elbo(&vars, xv, &y, 100, 2, Noise::Fixed(&noise)).unwrap().item();
        let kl = m.forward(&vars, xv, 2, Noise::Fixed(&noise)).unwrap().kl_term(rule.is_amortized()).item();
        assert!(((2.0 * l1 - l2) - kl).abs() < 1e-9 * kl.abs().max(1.0));
    }
}

#[test]
fn identical_mixture_components_collapse() {
    let dims = [2, 2, 1];
    let (x, y) = toy_data(4, 2, 21);
    let mut m = model(spec(Rule::AR2PP, &dims, 2, 2), &x, 5);
    let xi = m.xi[0];
    m.params.set(xi, Tensor::matrix(2, 2, vec![0.3, -0.7, 0.3, -0.7]));
    let single = {
        let mut s1 = model(spec(Rule::AR2PP, &dims, 2, 1), &x, 5);
        let xi1 = s1.xi[0];
        s1.params.set(xi1, Tensor::matrix(1, 2, vec![0.3, -0.7]));
        let tape = Tape::new();
        let vars = s1.params.bind(&tape);
        s1.pp_objective(&vars, tape.constant(x.clone()), &y, 4, 1, Noise::Fixed(&[])).unwrap().item()
    };
    let tape = Tape::new();
    let vars = m.params.bind(&tape);
    let both = m.pp_objective(&vars, tape.constant(x.clone()), &y, 4, 2, Noise::Fixed(&[])).unwrap().item();
    assert!((both - single).abs() < 1e-10 * single.abs(), "{both} vs {single}");
}

#[test]
fn predictive_objective_rejects_probit() {
    let (x, _) = toy_data(3, 2, 22);
    let mut sp = spec(Rule::AR2PP, &[2, 2, 1], 2, 2);
    sp.likelihood = LikelihoodKind::BernoulliProbit;
    let m = model(sp, &x, 1);
    let tape = Tape::new();
    let vars = m.params.bind(&tape);
    let y = Tensor::vector(vec![1.0, 0.0, 1.0]);
    assert!(matches!(
        m.pp_objective(&vars, tape.constant(x.clone()), &y, 3, 2, Noise::Fixed(&[])),
        Err(Error::Config(_))
    ));
}

#[test]
fn mismatched_targets_are_rejected() {
    let (x, _) = toy_data(3, 2, 23);
    let m = model(spec(Rule::AR2, &[2, 1], 2, 1), &x, 1);
    let tape = Tape::new();
    let vars = m.params.bind(&tape);
    let y = Tensor::vector(vec![1.0, 0.0]);
    let r = m.elbo(&vars, tape.constant(x.clone()), &y, 3, 1, Noise::Fixed(&[]));
    assert!(matches!(r, Err(Error::Data(_))));
}

#[test]
fn sampled_predictions_have_uniform_weights_and_valid_variances() {
    let dims = [2, 2, 1];
    let (x, _) = toy_data(10, 2, 24);
    for rule in [Rule::AR1, Rule::AR2, Rule::DS] {
        let m = model(spec(rule, &dims, 3, 1), &x, 2);
        let p = m.predict(&x, 16, &mut Rng::new(0, 6)).unwrap();
        assert_eq!(p.components(), 16);
        assert!((p.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.vars.data().iter().all(|&v| v >= 0.0));
        assert!(p.noise_var.unwrap() > 0.0);
    }
}

#[test]
fn class_probabilities_lie_in_unit_interval() {
    let dims = [2, 2, 1];
    let (x, _) = toy_data(10, 2, 25);
    let mut sp = spec(Rule::AR2P, &dims, 3, 4);
    sp.likelihood = LikelihoodKind::BernoulliProbit;
    let m = model(sp, &x, 2);
    let p = m.predict(&x, 4, &mut Rng::new(0, 6)).unwrap();
    assert!(p.noise_var.is_none());
    for v in p.class_probabilities(20) {
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn baselines_use_linear_means_on_inner_layers_only() {
    let dims = [3, 2, 2, 1];
    let (x, _) = toy_data(30, 3, 26);
    let m = model(spec(Rule::DS, &dims, 5, 1), &x, 1);
    assert!(matches!(m.layers[0].mean, crate::layers::LayerMean::Linear(_)));
    assert!(matches!(m.layers[1].mean, crate::layers::LayerMean::Linear(_)));
    assert!(matches!(m.layers[2].mean, crate::layers::LayerMean::Zero));
    let a = model(spec(Rule::AR2, &dims, 5, 1), &x, 1);
    assert!(a.layers.iter().all(|l| matches!(l.mean, crate::layers::LayerMean::Zero)));
}

#[test]
fn per_path_costs_multiply_beyond_the_first_layer() {
    let dims = [2, 4, 2, 1];
    let (x, _) = toy_data(10, 2, 27);
    let s = 7;
    let c1 = cost_report(&model(spec(Rule::AR1, &dims, 3, s), &x, 1), 10, s);
    let c2 = cost_report(&model(spec(Rule::AR2, &dims, 3, s), &x, 1), 10, s);
    assert_eq!(c1.layers[0].time(), c2.layers[0].time());
    for l in 1..3 {
        assert_eq!(c1.layers[l].time(), s as u64 * c2.layers[l].time());
    }
}

#[test]
fn doubling_inducing_points_scales_cubic_term_by_eight() {
    let (x, _) = toy_data(10, 2, 28);
    let a = cost_report(&model(spec(Rule::AR2, &[2, 2, 1], 3, 2), &x, 1), 10, 2);
    let b = cost_report(&model(spec(Rule::AR2, &[2, 2, 1], 6, 2), &x, 1), 10, 2);
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        assert_eq!(lb.gp_time, 8 * la.gp_time);
    }
}

#[test]
fn global_layers_have_no_inference_cost() {
    let (x, _) = toy_data(10, 2, 29);
    let c = cost_report(&model(spec(Rule::DS, &[2, 2, 1], 3, 2), &x, 1), 10, 2);
    assert!(c.layers.iter().all(|l| l.amortizer_time == 0));
}

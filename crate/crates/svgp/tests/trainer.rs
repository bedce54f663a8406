//! Trainer behavior: gradient audits, freeze schedule, minibatch identities
//! and convergence to the exact GP posterior.

use ndarray::{Array1, Array2};
use svgp::deep::{
    shallow_model, EvalCtx, IWConfig, LatentPosteriorTable, ModelGraph, ObjectiveKind,
};
use svgp::inducing::InducingSet;
use svgp::kernel::{positive_to_raw, KernelSpec, MeanSpec};
use svgp::layer::{exact_gp_oracle, VariationalState, Whitening};
use svgp::likelihood::{LikelihoodSpec, QuadratureRule};
use svgp::multioutput::{MoKind, MoLayer};
use svgp::params::Role;
use svgp::rng::{CounterRng, Purpose};
use svgp::train::{
    fd_audit, fit, grad_objective, ObjectiveName, ParameterSet, TrainConfig,
};

fn rand_mat(rng: &CounterRng, n: usize, d: usize, tag: u64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(i, j)| rng.normal(Purpose::Synth, tag, i as u64, j as u64))
}

fn toy_layer(rng: &CounterRng, din: usize, dout: usize, m: usize, tag: u64) -> MoLayer {
    let z = rand_mat(rng, m, din, tag);
    let mut vstate = VariationalState::prior_init(m, dout, Whitening::Full);
    for d in 0..dout {
        for i in 0..m {
            vstate.q_mean[[i, d]] = 0.5 * rng.normal(Purpose::Synth, tag + 7 + d as u64, i as u64, 0);
            for j in 0..i {
                vstate.q_sqrt_raw[d][[i, j]] =
                    0.1 * rng.normal(Purpose::Synth, tag + 17 + d as u64, i as u64, j as u64);
            }
        }
    }
    MoLayer {
        kind: MoKind::SeparateIndependent,
        mean: MeanSpec::Zero { outputs: dout },
        inducing: InducingSet::Dirac { z },
        per_output_z: None,
        kernels: (0..dout).map(|i| KernelSpec::rbf(0.9 + 0.2 * i as f64, &vec![0.7; din])).collect(),
        vstate,
    }
}

fn inner_mean(din: usize, dout: usize) -> MeanSpec {
    if din == dout {
        MeanSpec::Identity { dim: din }
    } else {
        let mut w = Array2::zeros((dout, din));
        for i in 0..dout.min(din) {
            w[[i, i]] = 1.0;
        }
        MeanSpec::Linear { weight: w, bias: Array1::zeros(dout) }
    }
}

#[test]
fn gradient_audit_all_objectives() {
    let rng = CounterRng::new(1);
    let quad = QuadratureRule::default();
    let x = rand_mat(&rng, 5, 1, 10);
    let y: Array1<f64> = (0..5).map(|i| rng.normal(Purpose::Synth, 11, i as u64, 0)).collect();
    let rows: Vec<usize> = (0..5).collect();

    for setting in 0..3u64 {
        // shallow ELBO
        let model = ModelGraph {
            layers: vec![toy_layer(&rng, 1, 1, 2, 100 + 13 * setting)],
            latent_dim: 0,
            likelihood: LikelihoodSpec::gaussian(0.3),
        };
        let ctx = EvalCtx { x: &x, y: &y, rows: &rows, total_n: 5, seed: 3 + setting, step: 0, quad: &quad };
        let rep = fd_audit(&model, None, &ctx, ObjectiveKind::Elbo, 1e-5).unwrap();
        assert!(rep.max_rel_err <= 1e-4, "elbo setting {setting}: {rep:?}");

        // deep L=2
        let mut l0 = toy_layer(&rng, 1, 1, 2, 200 + 13 * setting);
        l0.mean = inner_mean(1, 1);
        let deep = ModelGraph {
            layers: vec![l0, toy_layer(&rng, 1, 1, 2, 300 + 13 * setting)],
            latent_dim: 0,
            likelihood: LikelihoodSpec::gaussian(0.4),
        };
        let rep = fd_audit(&deep, None, &ctx, ObjectiveKind::Deep { n_mc: 2 }, 1e-5).unwrap();
        assert!(rep.max_rel_err <= 1e-4, "deep setting {setting}: {rep:?}");

        // latent-variable shallow
        let lv = ModelGraph {
            layers: vec![toy_layer(&rng, 2, 1, 2, 400 + 13 * setting)],
            latent_dim: 1,
            likelihood: LikelihoodSpec::gaussian(0.25),
        };
        let mut table = LatentPosteriorTable::init(5, 1, &rng);
        for i in 0..5 {
            table.mean[[i, 0]] = 0.3 * rng.normal(Purpose::Synth, 500 + setting, i as u64, 0);
            table.sqrt_raw[[i, 0]] = positive_to_raw(0.9);
        }
        let rep = fd_audit(&lv, Some(&table), &ctx, ObjectiveKind::Lv { n_mc: 2 }, 1e-5).unwrap();
        assert!(rep.max_rel_err <= 1e-4, "lv setting {setting}: {rep:?}");

        // importance-weighted latent shallow, S = 5
        let rep = fd_audit(
            &lv,
            Some(&table),
            &ctx,
            ObjectiveKind::IwLv(IWConfig::new(5, 1)),
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_err <= 1e-4, "iw setting {setting}: {rep:?}");
    }
}

#[test]
fn gradient_audit_iw_deep_and_bernoulli_and_hetero() {
    let rng = CounterRng::new(2);
    let quad = QuadratureRule::default();
    let x = rand_mat(&rng, 4, 1, 20);
    let rows: Vec<usize> = (0..4).collect();

    // IW deep with joint replicate blocks (S = 3, L = 2)
    let mut l0 = toy_layer(&rng, 2, 1, 2, 600);
    l0.mean = inner_mean(2, 1);
    let deep_lv = ModelGraph {
        layers: vec![l0, toy_layer(&rng, 1, 1, 2, 700)],
        latent_dim: 1,
        likelihood: LikelihoodSpec::gaussian(0.3),
    };
    let y: Array1<f64> = (0..4).map(|i| rng.normal(Purpose::Synth, 21, i as u64, 0)).collect();
    let table = {
        let mut t = LatentPosteriorTable::init(4, 1, &rng);
        for i in 0..4 {
            t.mean[[i, 0]] = 0.2 * rng.normal(Purpose::Synth, 22, i as u64, 0);
            t.sqrt_raw[[i, 0]] = positive_to_raw(0.7);
        }
        t
    };
    let ctx = EvalCtx { x: &x, y: &y, rows: &rows, total_n: 4, seed: 5, step: 1, quad: &quad };
    let rep = fd_audit(
        &deep_lv,
        Some(&table),
        &ctx,
        ObjectiveKind::IwLv(IWConfig::new(3, 1)),
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err <= 1e-4, "iw deep: {rep:?}");

    // Bernoulli shallow
    let bern = ModelGraph {
        layers: vec![toy_layer(&rng, 1, 1, 3, 800)],
        latent_dim: 0,
        likelihood: LikelihoodSpec::Bernoulli,
    };
    let yb: Array1<f64> = (0..4).map(|i| (i % 2) as f64).collect();
    let ctx = EvalCtx { x: &x, y: &yb, rows: &rows, total_n: 4, seed: 6, step: 0, quad: &quad };
    let rep = fd_audit(&bern, None, &ctx, ObjectiveKind::Elbo, 1e-5).unwrap();
    assert!(rep.max_rel_err <= 1e-4, "bernoulli: {rep:?}");

    // heteroscedastic two-output shallow
    let het = ModelGraph {
        layers: vec![toy_layer(&rng, 1, 2, 3, 900)],
        latent_dim: 0,
        likelihood: LikelihoodSpec::GaussianHetero,
    };
    let ctx = EvalCtx { x: &x, y: &y, rows: &rows, total_n: 4, seed: 7, step: 0, quad: &quad };
    let rep = fd_audit(&het, None, &ctx, ObjectiveKind::Elbo, 1e-5).unwrap();
    assert!(rep.max_rel_err <= 1e-4, "hetero: {rep:?}");
}

#[test]
fn gradients_flow_into_lmc_and_derivative_features() {
    let rng = CounterRng::new(3);
    let quad = QuadratureRule::default();
    let x = rand_mat(&rng, 4, 1, 30);
    let y: Array1<f64> = (0..4).map(|i| rng.normal(Purpose::Synth, 31, i as u64, 0)).collect();
    let rows: Vec<usize> = (0..4).collect();

    // LMC with 2 latent outputs mixed to 1
    let mut lay = toy_layer(&rng, 1, 2, 2, 950);
    lay.kind = MoKind::Lmc { w: ndarray::array![[0.8, 0.4]] };
    let model = ModelGraph {
        layers: vec![lay],
        latent_dim: 0,
        likelihood: LikelihoodSpec::gaussian(0.3),
    };
    let ctx = EvalCtx { x: &x, y: &y, rows: &rows, total_n: 4, seed: 8, step: 0, quad: &quad };
    let rep = fd_audit(&model, None, &ctx, ObjectiveKind::Elbo, 1e-5).unwrap();
    assert!(rep.max_rel_err <= 1e-4, "lmc: {rep:?}");

    // derivative features as inducing set
    let mut lay = toy_layer(&rng, 1, 1, 3, 960);
    lay.inducing = InducingSet::Derivative { z: rand_mat(&rng, 3, 1, 961), dims: vec![0, 0, 0] };
    let model = ModelGraph {
        layers: vec![lay],
        latent_dim: 0,
        likelihood: LikelihoodSpec::gaussian(0.3),
    };
    let rep = fd_audit(&model, None, &ctx, ObjectiveKind::Elbo, 1e-5).unwrap();
    assert!(rep.max_rel_err <= 1e-4, "derivative features: {rep:?}");
}

#[test]
fn constant_objective_has_zero_gradients() {
    // a parameter the objective ignores gets an exactly-zero gradient:
    // with no data dependence on the latent table rows outside the batch
    let rng = CounterRng::new(4);
    let quad = QuadratureRule::default();
    let model = ModelGraph {
        layers: vec![toy_layer(&rng, 2, 1, 2, 970)],
        latent_dim: 1,
        likelihood: LikelihoodSpec::gaussian(0.3),
    };
    let table = LatentPosteriorTable::init(6, 1, &rng);
    let x = rand_mat(&rng, 2, 1, 32);
    let y: Array1<f64> = (0..2).map(|i| rng.normal(Purpose::Synth, 33, i as u64, 0)).collect();
    let rows = vec![0usize, 1];
    let ctx = EvalCtx { x: &x, y: &y, rows: &rows, total_n: 6, seed: 9, step: 0, quad: &quad };
    let gr = grad_objective(&model, Some(&table), &ctx, ObjectiveKind::Lv { n_mc: 1 }).unwrap();
    let pidx = gr.decls.iter().position(|d| d.name == "latent.mean").unwrap();
    // rows 2..5 were not in the batch: zero gradient
    for i in 2..6 {
        assert_eq!(gr.grads[pidx][[i, 0]], 0.0);
    }
    assert!(gr.grads[pidx][[0, 0]] != 0.0 || gr.grads[pidx][[1, 0]] != 0.0);
}

#[test]
fn fit_zero_learning_rate_keeps_model() {
    let rng = CounterRng::new(5);
    let model = ModelGraph {
        layers: vec![toy_layer(&rng, 1, 1, 2, 980)],
        latent_dim: 0,
        likelihood: LikelihoodSpec::gaussian(0.3),
    };
    let x = rand_mat(&rng, 6, 1, 40);
    let y: Array1<f64> = (0..6).map(|i| rng.normal(Purpose::Synth, 41, i as u64, 0)).collect();
    let mut cfg = TrainConfig::defaults(ObjectiveName::Elbo, 7);
    cfg.steps = 1;
    cfg.learning_rate = 0.0;
    cfg.batch_size = 6;
    let before = ParameterSet::collect(&model, None).unwrap();
    let out = fit(model, None, &x, &y, &cfg, &QuadratureRule::default()).unwrap();
    let after = ParameterSet::collect(&out.model, None).unwrap();
    assert_eq!(out.trace.len(), 1);
    for (a, b) in before.values.iter().zip(after.values.iter()) {
        assert_eq!(a, b);
    }
}

#[test]
fn fit_is_deterministic_and_freeze_keeps_generative_parameters() {
    let rng = CounterRng::new(6);
    let build = || ModelGraph {
        layers: vec![toy_layer(&rng, 1, 1, 3, 990)],
        latent_dim: 0,
        likelihood: LikelihoodSpec::gaussian(0.4),
    };
    let x = rand_mat(&rng, 10, 1, 50);
    let y: Array1<f64> = (0..10).map(|i| (x[[i, 0]] * 1.3).sin()).collect();
    let mut cfg = TrainConfig::defaults(ObjectiveName::Elbo, 13);
    cfg.steps = 40;
    cfg.batch_size = 5;
    cfg.freeze_generative_steps = 40;
    let quad = QuadratureRule::default();

    let r1 = fit(build(), None, &x, &y, &cfg, &quad).unwrap();
    let r2 = fit(build(), None, &x, &y, &cfg, &quad).unwrap();
    let p1 = ParameterSet::collect(&r1.model, None).unwrap();
    let p2 = ParameterSet::collect(&r2.model, None).unwrap();
    for (a, b) in p1.values.iter().zip(p2.values.iter()) {
        assert_eq!(a, b, "training is not deterministic");
    }
    // all-frozen run leaves generative parameters bit-identical
    let before = ParameterSet::collect(&build(), None).unwrap();
    for (i, d) in p1.decls.iter().enumerate() {
        if d.role == Role::Generative {
            assert_eq!(p1.values[i], before.values[i], "generative {} moved", d.name);
        } else {
            assert_ne!(p1.values[i], before.values[i], "variational {} frozen", d.name);
        }
    }
}

#[test]
fn epoch_mean_of_minibatch_elbo_equals_full_batch() {
    let rng = CounterRng::new(7);
    let model = ModelGraph {
        layers: vec![toy_layer(&rng, 1, 1, 3, 995)],
        latent_dim: 0,
        likelihood: LikelihoodSpec::gaussian(0.2),
    };
    let x = rand_mat(&rng, 8, 1, 60);
    let y: Array1<f64> = (0..8).map(|i| rng.normal(Purpose::Synth, 61, i as u64, 0)).collect();
    let quad = QuadratureRule::default();
    let full = {
        let rows: Vec<usize> = (0..8).collect();
        let ctx = EvalCtx { x: &x, y: &y, rows: &rows, total_n: 8, seed: 5, step: 0, quad: &quad };
        svgp::deep::eval_objective(&model, None, &ctx, ObjectiveKind::Elbo).unwrap().0
    };
    let mut cfg = TrainConfig::defaults(ObjectiveName::Elbo, 5);
    cfg.steps = 4; // one epoch of 4 batches of 2
    cfg.batch_size = 2;
    cfg.learning_rate = 0.0;
    let out = fit(model, None, &x, &y, &cfg, &quad).unwrap();
    let mean: f64 = out.trace.iter().map(|t| t.elbo).sum::<f64>() / 4.0;
    assert!(
        (mean - full).abs() <= 1e-12 * (1.0 + full.abs()),
        "epoch mean {mean} vs full {full}"
    );
}

#[test]
fn divergence_error_after_persistent_nonfinite() {
    let rng = CounterRng::new(8);
    let mut model = ModelGraph {
        layers: vec![toy_layer(&rng, 1, 1, 2, 997)],
        latent_dim: 0,
        likelihood: LikelihoodSpec::gaussian(0.2),
    };
    // poison a parameter so every objective evaluation is non-finite
    model.layers[0].vstate.q_mean[[0, 0]] = f64::NAN;
    let x = rand_mat(&rng, 4, 1, 70);
    let y: Array1<f64> = (0..4).map(|i| rng.normal(Purpose::Synth, 71, i as u64, 0)).collect();
    let mut cfg = TrainConfig::defaults(ObjectiveName::Elbo, 1);
    cfg.steps = 50;
    cfg.batch_size = 4;
    match fit(model, None, &x, &y, &cfg, &QuadratureRule::default()) {
        Err(svgp::Error::Divergence(10)) => {}
        Err(other) => panic!("unexpected error {other}"),
        Ok(_) => panic!("expected divergence error"),
    }
}

#[test]
fn titsias_consistency_at_inducing_equals_training_inputs() {
    // Z = X, Gaussian likelihood, fixed hyperparameters: optimizing q alone
    // drives the ELBO to the exact log marginal likelihood
    let rng = CounterRng::new(9);
    let n = 16;
    let x = rand_mat(&rng, n, 1, 80);
    let y: Array1<f64> = (0..n)
        .map(|i| (1.7 * x[[i, 0]]).sin() + 0.1 * rng.normal(Purpose::Synth, 81, i as u64, 0))
        .collect();
    let kernel = KernelSpec::rbf(1.0, &[0.8]);
    let noise = 0.05;
    let model = shallow_model(
        kernel.clone(),
        MeanSpec::Zero { outputs: 1 },
        InducingSet::Dirac { z: x.clone() },
        VariationalState::prior_init(n, 1, Whitening::Full),
        LikelihoodSpec::gaussian(noise),
    );
    let mut cfg = TrainConfig::defaults(ObjectiveName::Elbo, 3);
    cfg.steps = 4000;
    cfg.batch_size = n;
    cfg.learning_rate = 0.03;
    cfg.freeze_generative_steps = usize::MAX; // variational parameters only
    let quad = QuadratureRule::default();
    let out = fit(model, None, &x, &y, &cfg, &quad).unwrap();
    let elbo = out.trace.last().unwrap().elbo;
    let (_, logml) =
        exact_gp_oracle(&kernel, &MeanSpec::Zero { outputs: 1 }, noise, &x, &y, &x).unwrap();
    assert!(
        (elbo - logml).abs() < 1e-3,
        "gap {} (elbo {elbo}, logml {logml})",
        (elbo - logml).abs()
    );
}

//! Multioutput bundle behavior against dense oracles.

use ndarray::{array, Array1, Array2};
use svgp::gauss;
use svgp::inducing::InducingSet;
use svgp::kernel::{KernelSpec, MeanSpec};
use svgp::layer::{sqrt_to_raw, VariationalState, Whitening};
use svgp::multioutput::{
    assemble_block_joint, derivative_gp_predict, mo_predict, mo_prior_kl, MoKind, MoLayer,
};
use svgp::rng::{CounterRng, Purpose};

fn rand_mat(rng: &CounterRng, n: usize, d: usize, tag: u64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(i, j)| rng.normal(Purpose::Synth, tag, i as u64, j as u64))
}

fn bundle(rng: &CounterRng, d_g: usize, m: usize, kind: MoKind) -> MoLayer {
    let z = rand_mat(rng, m, 1, 0);
    let mut vstate = VariationalState::prior_init(m, d_g, Whitening::Full);
    for dcol in 0..d_g {
        for i in 0..m {
            vstate.q_mean[[i, dcol]] =
                rng.normal(Purpose::Synth, 1 + dcol as u64, i as u64, 0);
            for j in 0..i {
                vstate.q_sqrt_raw[dcol][[i, j]] =
                    0.2 * rng.normal(Purpose::Synth, 10 + dcol as u64, i as u64, j as u64);
            }
        }
    }
    MoLayer {
        kind,
        mean: MeanSpec::Zero { outputs: d_g },
        inducing: InducingSet::Dirac { z },
        per_output_z: None,
        kernels: (0..d_g).map(|i| KernelSpec::rbf(1.0 + 0.2 * i as f64, &[0.7])).collect(),
        vstate,
    }
}

#[test]
fn lmc_identity_mixing_matches_separate() {
    let rng = CounterRng::new(42);
    let sep = bundle(&rng, 2, 4, MoKind::SeparateIndependent);
    let mut lmc = sep.clone();
    lmc.kind = MoKind::Lmc { w: Array2::eye(2) };
    let x = rand_mat(&rng, 7, 1, 99);
    let ps = mo_predict(&sep, &x, true).unwrap();
    let pl = mo_predict(&lmc, &x, true).unwrap();
    for i in 0..7 {
        for d in 0..2 {
            assert!((ps.mean[[i, d]] - pl.mean[[i, d]]).abs() < 1e-10);
            assert!((ps.var[[i, d]] - pl.var[[i, d]]).abs() < 1e-10);
        }
    }
    // separate bundles have exactly zero cross-output covariance
    let covs = ps.output_cov.unwrap();
    for c in &covs {
        assert_eq!(c[[0, 1]], 0.0);
        assert_eq!(c[[1, 0]], 0.0);
    }
}

#[test]
fn lmc_rank_one_mixing() {
    let rng = CounterRng::new(7);
    let mut lay = bundle(&rng, 1, 3, MoKind::SeparateIndependent);
    lay.kind = MoKind::Lmc { w: array![[1.0], [1.0]] };
    lay.mean = MeanSpec::Zero { outputs: 1 };
    let x = rand_mat(&rng, 3, 1, 5);
    let p = mo_predict(&lay, &x, true).unwrap();
    let base = {
        let mut b = lay.clone();
        b.kind = MoKind::SeparateIndependent;
        mo_predict(&b, &x, false).unwrap()
    };
    let covs = p.output_cov.unwrap();
    for i in 0..3 {
        let v = base.var[[i, 0]];
        for a in 0..2 {
            for bb in 0..2 {
                assert!((covs[i][[a, bb]] - v).abs() < 1e-12);
            }
        }
        // symmetric PSD within tolerance
        assert!(covs[i][[0, 0]] >= -1e-10);
        assert!((covs[i][[0, 1]] - covs[i][[1, 0]]).abs() < 1e-12);
    }
}

#[test]
fn mo_prior_kl_matches_dense_block_oracle() {
    let rng = CounterRng::new(11);
    for (d_g, m) in [(1usize, 3usize), (2, 4), (3, 5)] {
        for whitening in [Whitening::Full, Whitening::MeanOnly, Whitening::None] {
            let mut lay = bundle(&rng, d_g, m, MoKind::SeparateIndependent);
            lay.vstate.whitening = whitening;
            let kl = mo_prior_kl(&lay).unwrap();
            let (q, p) = assemble_block_joint(&lay).unwrap();
            let dense = gauss::kl(&q, &p).unwrap();
            assert!(
                (kl - dense).abs() < 1e-8 * (1.0 + dense),
                "d_g={d_g} m={m} {whitening:?}: {kl} vs {dense}"
            );
        }
    }
}

#[test]
fn kl_additivity_across_outputs() {
    let rng = CounterRng::new(13);
    let single = bundle(&rng, 1, 4, MoKind::SeparateIndependent);
    let kl1 = mo_prior_kl(&single).unwrap();
    // duplicate the same head twice
    let mut double = single.clone();
    double.kernels.push(single.kernels[0].clone());
    double.mean = MeanSpec::Zero { outputs: 2 };
    let mut q_mean = Array2::zeros((4, 2));
    for i in 0..4 {
        q_mean[[i, 0]] = single.vstate.q_mean[[i, 0]];
        q_mean[[i, 1]] = single.vstate.q_mean[[i, 0]];
    }
    double.vstate.q_mean = q_mean;
    double.vstate.q_sqrt_raw = vec![
        single.vstate.q_sqrt_raw[0].clone(),
        single.vstate.q_sqrt_raw[0].clone(),
    ];
    let kl2 = mo_prior_kl(&double).unwrap();
    assert!((kl2 - 2.0 * kl1).abs() < 1e-10, "{kl2} vs {}", 2.0 * kl1);

    // prior state has zero KL
    let prior = MoLayer {
        kind: MoKind::SeparateIndependent,
        mean: MeanSpec::Zero { outputs: 2 },
        inducing: single.inducing.clone(),
        per_output_z: None,
        kernels: vec![single.kernels[0].clone(), single.kernels[0].clone()],
        vstate: VariationalState::prior_init(4, 2, Whitening::Full),
    };
    assert!(mo_prior_kl(&prior).unwrap().abs() < 1e-12);
}

#[test]
fn separate_elbo_pieces_double_with_output_copies() {
    // VE sum and KL both double when an independent copy of the head is added
    use svgp::likelihood::{variational_expectation, LikelihoodSpec, QuadratureRule};
    let rng = CounterRng::new(17);
    let single = bundle(&rng, 1, 3, MoKind::SeparateIndependent);
    let x = rand_mat(&rng, 6, 1, 31);
    let y: Array1<f64> = (0..6).map(|i| rng.normal(Purpose::Synth, 32, i as u64, 0)).collect();
    let quad = QuadratureRule::default();
    let lik = LikelihoodSpec::gaussian(0.2);

    let p1 = mo_predict(&single, &x, false).unwrap();
    let mut ve1 = 0.0;
    for i in 0..6 {
        ve1 += variational_expectation(&lik, y[i], &[p1.mean[[i, 0]]], &[p1.var[[i, 0]]], &quad)
            .unwrap();
    }
    let elbo1 = ve1 - mo_prior_kl(&single).unwrap();

    let mut double = single.clone();
    double.kernels.push(single.kernels[0].clone());
    double.mean = MeanSpec::Zero { outputs: 2 };
    let mut q_mean = Array2::zeros((3, 2));
    for i in 0..3 {
        q_mean[[i, 0]] = single.vstate.q_mean[[i, 0]];
        q_mean[[i, 1]] = single.vstate.q_mean[[i, 0]];
    }
    double.vstate.q_mean = q_mean;
    double.vstate.q_sqrt_raw = vec![
        single.vstate.q_sqrt_raw[0].clone(),
        single.vstate.q_sqrt_raw[0].clone(),
    ];
    let p2 = mo_predict(&double, &x, false).unwrap();
    let mut ve2 = 0.0;
    for i in 0..6 {
        for d in 0..2 {
            ve2 += variational_expectation(
                &lik,
                y[i],
                &[p2.mean[[i, d]]],
                &[p2.var[[i, d]]],
                &quad,
            )
            .unwrap();
        }
    }
    let elbo2 = ve2 - mo_prior_kl(&double).unwrap();
    assert!((elbo2 - 2.0 * elbo1).abs() < 1e-9, "{elbo2} vs {}", 2.0 * elbo1);
}

#[test]
fn derivative_gp_zero_mean_and_unit_lag_variance() {
    let l = 0.9;
    let k = KernelSpec::rbf(1.0, &[l]);
    let x = array![[0.2], [1.4]];
    let g = derivative_gp_predict(&k, &MeanSpec::Zero { outputs: 1 }, &x).unwrap();
    for v in g.mean.iter() {
        assert_eq!(*v, 0.0);
    }
    for i in 0..2 {
        assert!((g.cov[[i, i]] - 1.0 / (l * l)).abs() < 1e-9);
    }
    // linear mean: constant gradient
    let lin = MeanSpec::Linear { weight: array![[2.5]], bias: array![0.3] };
    let g2 = derivative_gp_predict(&k, &lin, &x).unwrap();
    for v in g2.mean.iter() {
        assert!((*v - 2.5).abs() < 1e-12);
    }
}

#[test]
fn derivative_gp_cov_matches_path_increments() {
    // covariance of (f(x+h)−f(x))/h over 1e5 prior paths vs analytic hessian
    let k = KernelSpec::rbf(1.0, &[0.8]);
    let xs = [0.3f64, 1.1];
    let h = 1e-3;
    let pts = array![[xs[0]], [xs[0] + h], [xs[1]], [xs[1] + h]];
    let kxx = svgp::kernel::kern_matrix(&k, &pts, &pts).unwrap();
    let joint = gauss::Gaussian::new(Array1::zeros(4), gauss::symmetrize(kxx)).unwrap();
    let rng = CounterRng::new(23);
    let paths = 100_000;
    let mut noise = Array2::zeros((4, paths));
    for i in 0..4 {
        for p in 0..paths {
            noise[[i, p]] = rng.normal(Purpose::Synth, 50, p as u64, i as u64);
        }
    }
    let samples = gauss::sample(&joint, &noise).unwrap();
    let mut inc = Array2::zeros((2, paths));
    for p in 0..paths {
        inc[[0, p]] = (samples[[1, p]] - samples[[0, p]]) / h;
        inc[[1, p]] = (samples[[3, p]] - samples[[2, p]]) / h;
    }
    let g = derivative_gp_predict(&k, &MeanSpec::Zero { outputs: 1 }, &array![[xs[0]], [xs[1]]])
        .unwrap();
    for a in 0..2 {
        for b in 0..2 {
            let mut c = 0.0;
            let (ma, mb) = (
                inc.row(a).sum() / paths as f64,
                inc.row(b).sum() / paths as f64,
            );
            for p in 0..paths {
                c += (inc[[a, p]] - ma) * (inc[[b, p]] - mb);
            }
            c /= paths as f64;
            let expect = g.cov[[a, b]];
            let se = ((g.cov[[a, a]] * g.cov[[b, b]] + expect * expect) / paths as f64).sqrt();
            assert!(
                (c - expect).abs() < 3.0 * se + 1e-3,
                "({a},{b}): {c} vs {expect} (se {se})"
            );
        }
    }
}

#[test]
fn per_output_inducing_sets_supported() {
    let rng = CounterRng::new(29);
    let mut lay = bundle(&rng, 2, 3, MoKind::SeparateIndependent);
    lay.per_output_z = Some(vec![
        InducingSet::Dirac { z: rand_mat(&rng, 3, 1, 60) },
        InducingSet::Dirac { z: rand_mat(&rng, 3, 1, 61) },
    ]);
    let x = rand_mat(&rng, 4, 1, 62);
    let p = mo_predict(&lay, &x, false).unwrap();
    assert!(p.mean.iter().all(|v| v.is_finite()));
    let kl = mo_prior_kl(&lay).unwrap();
    let (q, pr) = assemble_block_joint(&lay).unwrap();
    let dense = gauss::kl(&q, &pr).unwrap();
    assert!((kl - dense).abs() < 1e-8 * (1.0 + dense));
}

#[test]
fn lmc_w_initialization_near_identity() {
    let rng = CounterRng::new(1);
    let w = MoLayer::lmc_init_w(3, 2, &rng);
    assert_eq!(w.dim(), (3, 2));
    assert!((w[[0, 0]] - 1.0).abs() < 0.05);
    assert!((w[[1, 1]] - 1.0).abs() < 0.05);
    assert!(w[[2, 0]].abs() < 0.05);
    assert_eq!(w, MoLayer::lmc_init_w(3, 2, &rng));
}

#[test]
fn sqrt_raw_roundtrip() {
    let l = array![[0.5, 0.0], [0.3, 1.2]];
    let raw = sqrt_to_raw(&l);
    let eff = svgp::layer::effective_sqrt(&raw);
    for (a, b) in l.iter().zip(eff.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

//! Kernel and inducing-feature invariants: positive definiteness, exact
//! symmetry, and finite-difference agreement for derivative features.

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use svgp::inducing::{kfu, kuu, InducingSet};
use svgp::kernel::{kern_cross_hess, kern_grad, kern_matrix, KernelSpec};
use svgp::linalg::cholesky_lower;
use svgp::rng::{CounterRng, Purpose};

fn rand_mat(rng: &CounterRng, n: usize, d: usize, tag: u64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(i, j)| {
        2.0 * rng.normal(Purpose::Synth, tag, i as u64, j as u64)
    })
}

#[test]
fn kernel_matrices_positive_definite_with_jitter() {
    let rng = CounterRng::new(1);
    for case in 0..100u64 {
        let n = 2 + (case % 63) as usize;
        let d = 1 + (case % 3) as usize;
        let x = rand_mat(&rng, n, d, case);
        let k = KernelSpec::rbf(
            0.5 + rng.uniform(Purpose::Synth, 1000 + case, 0, 0),
            &vec![0.3 + rng.uniform(Purpose::Synth, 2000 + case, 0, 0); d],
        );
        let mut m = kern_matrix(&k, &x, &x).unwrap();
        for i in 0..n {
            m[[i, i]] += 1e-10;
        }
        assert!(
            cholesky_lower(&m).is_some(),
            "case {case}: kernel matrix + 1e-10 I not PD (n={n}, d={d})"
        );
    }
}

#[test]
fn kuu_symmetric_and_pd_for_random_inducing() {
    let rng = CounterRng::new(2);
    for case in 0..30u64 {
        let m = 2 + (case % 31) as usize;
        let z = rand_mat(&rng, m, 1, 300 + case);
        let k = KernelSpec::rbf(1.0, &[0.6]);
        for ind in [
            InducingSet::Dirac { z: z.clone() },
            InducingSet::Derivative { z: z.clone(), dims: vec![0; m] },
        ] {
            let kmat = kuu(&ind, &k).unwrap();
            for i in 0..m {
                for j in 0..m {
                    assert_eq!(kmat[[i, j]], kmat[[j, i]], "asymmetry at ({i},{j})");
                }
            }
            let mut jittered = kmat.clone();
            let scale = jittered.diag().sum() / m as f64;
            for i in 0..m {
                jittered[[i, i]] += 1e-8 * scale;
            }
            assert!(cholesky_lower(&jittered).is_some(), "case {case} not PD");
        }
    }
}

#[test]
fn derivative_features_match_finite_differences_on_100_pairs() {
    // kuu and kfu entries against central differences of the kernel
    let rng = CounterRng::new(3);
    let h = 1e-5;
    for case in 0..100u64 {
        let d = 1 + (case % 3) as usize;
        let k = KernelSpec::rbf(
            0.6 + rng.uniform(Purpose::Synth, 400 + case, 0, 0),
            &(0..d)
                .map(|i| 0.4 + rng.uniform(Purpose::Synth, 500 + case, i as u64, 0))
                .collect::<Vec<_>>(),
        );
        let a: Array1<f64> =
            (0..d).map(|i| rng.normal(Purpose::Synth, 600 + case, i as u64, 0)).collect();
        let b: Array1<f64> =
            (0..d).map(|i| rng.normal(Purpose::Synth, 700 + case, i as u64, 0)).collect();
        let da = (case % d as u64) as usize;
        let db = ((case / 3) % d as u64) as usize;

        let kv = |x: &Array1<f64>, y: &Array1<f64>| {
            let xr = x.clone().insert_axis(ndarray::Axis(0));
            let yr = y.clone().insert_axis(ndarray::Axis(0));
            kern_matrix(&k, &xr, &yr).unwrap()[[0, 0]]
        };
        // kfu entry: ∂k(a, ·)/∂·_db at b
        let mut bp = b.clone();
        bp[db] += h;
        let mut bm = b.clone();
        bm[db] -= h;
        let fd_grad = (kv(&a, &bp) - kv(&a, &bm)) / (2.0 * h);
        let an_grad = kern_grad(&k, &a, &b, db).unwrap();
        assert!((fd_grad - an_grad).abs() < 1e-5, "case {case}: grad {fd_grad} vs {an_grad}");

        // kuu entry: ∂²k/∂a_da ∂b_db
        let mut ap = a.clone();
        ap[da] += h;
        let mut am = a.clone();
        am[da] -= h;
        let fd_hess =
            (kern_grad(&k, &ap, &b, db).unwrap() - kern_grad(&k, &am, &b, db).unwrap()) / (2.0 * h);
        let an_hess = kern_cross_hess(&k, &a, &b, da, db).unwrap();
        assert!((fd_hess - an_hess).abs() < 1e-5, "case {case}: hess {fd_hess} vs {an_hess}");

        // and through the inducing-feature surface
        let ind = InducingSet::Derivative {
            z: b.clone().insert_axis(ndarray::Axis(0)),
            dims: vec![db],
        };
        let kf = kfu(&a.clone().insert_axis(ndarray::Axis(0)), &ind, &k).unwrap();
        assert!((kf[[0, 0]] - an_grad).abs() < 1e-12);
        let ind2 = InducingSet::Derivative {
            z: ndarray::concatenate(
                ndarray::Axis(0),
                &[
                    a.clone().insert_axis(ndarray::Axis(0)).view(),
                    b.clone().insert_axis(ndarray::Axis(0)).view(),
                ],
            )
            .unwrap(),
            dims: vec![da, db],
        };
        let ku = kuu(&ind2, &k).unwrap();
        assert!((ku[[0, 1]] - an_hess).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cross_kernel_transpose_symmetry(
        seed in 0u64..1000,
        n in 1usize..6,
        m in 1usize..6,
        d in 1usize..3,
    ) {
        let rng = CounterRng::new(seed);
        let a = rand_mat(&rng, n, d, 1);
        let b = rand_mat(&rng, m, d, 2);
        let k = KernelSpec::rbf(1.2, &vec![0.7; d]);
        let kab = kern_matrix(&k, &a, &b).unwrap();
        let kba = kern_matrix(&k, &b, &a).unwrap();
        prop_assert_eq!(kab, kba.t().to_owned());
    }

    #[test]
    fn gaussian_kl_translation_invariant(
        seed in 0u64..1000,
        shift in -5.0f64..5.0,
    ) {
        // KL(N(a,s)||N(b,t)) depends on means only through their difference
        let rng = CounterRng::new(seed);
        let s = 0.2 + rng.uniform(Purpose::Synth, 0, 0, 0);
        let t = 0.2 + rng.uniform(Purpose::Synth, 1, 0, 0);
        let (ma, mb) = (
            rng.normal(Purpose::Synth, 2, 0, 0),
            rng.normal(Purpose::Synth, 3, 0, 0),
        );
        let g = |m: f64, v: f64| svgp::gauss::Gaussian::new(
            ndarray::array![m], ndarray::array![[v]]).unwrap();
        let k1 = svgp::gauss::kl(&g(ma, s), &g(mb, t)).unwrap();
        let k2 = svgp::gauss::kl(&g(ma + shift, s), &g(mb + shift, t)).unwrap();
        prop_assert!((k1 - k2).abs() < 1e-9);
    }
}

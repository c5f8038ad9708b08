mod common;

use gptube::gp::{kernel_eval, Dataset, FitOptions, GpModel, Hyperparams, JITTER};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use common::{random_model, rng};

/// Posterior moments from an LU solve of the full (jittered) Gram matrix.
fn dense_posterior(m: &GpModel, dim: usize, x: &[f64]) -> (f64, f64) {
    let h = &m.hyperparams()[dim];
    let data = m.dataset();
    let n = data.len();
    let gram = DMatrix::from_fn(n, n, |i, j| {
        kernel_eval(h, data.input(i), data.input(j)).unwrap() + if i == j { h.noise_variance + JITTER * h.signal_variance } else { 0.0 }
    });
    let k = DVector::from_iterator(n, data.inputs().map(|xj| kernel_eval(h, x, xj).unwrap()));
    let lu = gram.lu();
    let alpha = lu.solve(&data.target_column(dim)).unwrap();
    let v = lu.solve(&k).unwrap();
    (k.dot(&alpha), h.signal_variance - k.dot(&v))
}

#[test]
fn posterior_matches_dense_solve() {
    for seed in 0..20 {
        let dim = 1 + seed as usize % 3;
        let m = random_model(seed, dim, 2, 15);
        let mut r = rng(seed + 40);
        for _ in 0..10 {
            let x: Vec<f64> = (0..dim).map(|_| r.random_range(-1.5..1.5)).collect();
            for o in 0..2 {
                let (mu, var) = dense_posterior(&m, o, &x);
                let scale = 1.0 + mu.abs();
                assert!((m.mean_dim(o, &x) - mu).abs() < 1e-7 * scale, "seed {seed}: {} vs {mu}", m.mean_dim(o, &x));
                assert!((m.variance_dim(o, &x).unwrap() - var).abs() < 1e-7, "seed {seed}: {} vs {var}", m.variance_dim(o, &x).unwrap());
            }
        }
    }
}

#[test]
fn fit_recovers_lengthscale_within_factor_two() {
    let true_ls = 0.4;
    let h = Hyperparams::isotropic(1.0, true_ls, 1e-4, 1).unwrap();
    let mut r = rng(3);
    let xs: Vec<f64> = (0..150).map(|_| r.random_range(-3.0..3.0)).collect();
    let n = xs.len();
    let gram = DMatrix::from_fn(n, n, |i, j| {
        kernel_eval(&h, &[xs[i]], &[xs[j]]).unwrap() + if i == j { 1e-4 } else { 0.0 }
    });
    let l = gram.cholesky().unwrap().unpack();
    let z = DVector::from_iterator(n, (0..n).map(|_| r.sample::<f64, _>(StandardNormal)));
    let y = l * z;
    let data = Dataset::new(xs.iter().map(|x| vec![*x]).collect(), y.iter().map(|v| vec![*v]).collect()).unwrap();
    let (m, _) = GpModel::fit(data, &FitOptions::default()).unwrap();
    let fitted = m.hyperparams()[0].lengthscales[0];
    assert!(fitted > true_ls / 2.0 && fitted < true_ls * 2.0, "fitted lengthscale {fitted}");
}

#[test]
fn model_document_round_trip() {
    let m = random_model(5, 2, 2, 10);
    let back = GpModel::from_json(&m.to_json().unwrap()).unwrap();
    for x in [[0.1, 0.2], [-0.7, 0.9]] {
        assert_eq!(m.posterior_mean(&x).unwrap(), back.posterior_mean(&x).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adding_a_point_never_increases_variance(
        seed in 0u64..1000,
        new in prop::collection::vec(-1.5f64..1.5, 2),
        probe in prop::collection::vec(-1.5f64..1.5, 2),
    ) {
        let m = random_model(seed, 2, 1, 6);
        let mut data = m.dataset().clone();
        data.push(&new, &[0.3]).unwrap();
        let bigger = GpModel::new(data, m.hyperparams()).unwrap();
        let before = m.variance_dim(0, &probe).unwrap();
        let after = bigger.variance_dim(0, &probe).unwrap();
        prop_assert!(after <= before + 1e-10, "{after} > {before}");
    }

    #[test]
    fn kernel_is_symmetric_and_bounded(
        a in prop::collection::vec(-5.0f64..5.0, 3),
        b in prop::collection::vec(-5.0f64..5.0, 3),
        sf2 in 0.1f64..10.0,
    ) {
        let h = Hyperparams::new(sf2, vec![0.5, 1.0, 2.0], 1e-3).unwrap();
        let kab = kernel_eval(&h, &a, &b).unwrap();
        prop_assert_eq!(kab, kernel_eval(&h, &b, &a).unwrap());
        prop_assert!(kab > 0.0 && kab <= sf2);
        prop_assert_eq!(kernel_eval(&h, &a, &a).unwrap(), sf2);
    }
}

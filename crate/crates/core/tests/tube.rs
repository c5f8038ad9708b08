mod common;

use gptube::control::Controls;
use gptube::gp::{Dataset, GpModel, Hyperparams};
use gptube::moments::GaussianBelief;
use gptube::tube::{
    bound_trajectory, dudley_integral, dudley_upper_sum, initial_certificate, initial_error_probability,
    propagate_probability, select_k_with_stats, step_domain, RegionStats, TubeConfig,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use common::{dudley_oracle, rng};

/// 1-D contraction `x' = 0.8 x` learned from 30 noise-free points.
fn contraction() -> GpModel {
    let xs: Vec<Vec<f64>> = (0..30).map(|k| vec![-1.5 + 0.1 * k as f64]).collect();
    let ys = xs.iter().map(|x| vec![0.8 * x[0]]).collect();
    let h = Hyperparams::isotropic(1.0, 1.0, 1e-6, 1).unwrap();
    GpModel::new(Dataset::new(xs, ys).unwrap(), vec![h]).unwrap()
}

#[test]
fn initial_probability_matches_normal_tail() {
    let p = initial_error_probability(&[0.0], &DMatrix::from_element(1, 1, 0.01), &[0.0], 0.196).unwrap();
    assert!((p - 0.05).abs() < 2e-4, "{p}");
}

#[test]
fn initial_probability_bounds_l1_exceedance_in_2d() {
    let mu = [0.1, -0.2];
    let var = [0.04, 0.09];
    let k0 = 0.9;
    let bound = initial_error_probability(&mu, &DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(&var)), &[0.0, 0.0], k0).unwrap();
    let mut r = rng(17);
    let n = 200_000;
    let outside = (0..n)
        .filter(|_| {
            let x0 = mu[0] + var[0].sqrt() * r.sample::<f64, _>(StandardNormal);
            let x1 = mu[1] + var[1].sqrt() * r.sample::<f64, _>(StandardNormal);
            x0.abs() + x1.abs() > k0
        })
        .count() as f64
        / n as f64;
    let se = (outside * (1.0 - outside) / n as f64).sqrt();
    assert!(outside <= bound + 3.0 * se, "{outside} > {bound}");
}

fn stats_after_first_step(cfg: &TubeConfig) -> (gptube::tube::StepCertificate, RegionStats, Vec<f64>) {
    let m = contraction();
    let init = GaussianBelief::diagonal(vec![0.3], &[0.01]).unwrap();
    let prev = initial_certificate(&init, cfg).unwrap();
    let g = m.posterior_mean(&prev.center).unwrap();
    let stats = RegionStats::compute(&m, &step_domain(&prev, &Controls::None).unwrap(), &g, cfg).unwrap();
    (prev, stats, g)
}

#[test]
fn select_k_agrees_with_linear_scan() {
    let cfg = TubeConfig::default();
    let (prev, stats, g) = stats_after_first_step(&cfg);
    let scan = cfg
        .grid
        .iter()
        .copied()
        .find(|k| propagate_probability(prev.p, stats.tail(*k).q) < cfg.epsilon)
        .unwrap();
    let cert = select_k_with_stats(&prev, &stats, &g, &cfg).unwrap();
    assert_eq!(cert.k, scan);
    assert!(cert.p < cfg.epsilon);
}

#[test]
fn larger_epsilon_never_needs_a_larger_radius() {
    let mut last = f64::INFINITY;
    for eps in [0.06, 0.1, 0.2, 0.4] {
        let cfg = TubeConfig {
            epsilon: eps,
            ..TubeConfig::default()
        };
        let (prev, stats, g) = stats_after_first_step(&cfg);
        let k = select_k_with_stats(&prev, &stats, &g, &cfg).unwrap().k;
        assert!(k <= last, "epsilon {eps}: {k} > {last}");
        last = k;
    }
}

#[test]
fn unit_epsilon_gives_the_smallest_grid_radius() {
    let cfg = TubeConfig {
        epsilon: 1.0,
        ..TubeConfig::default()
    };
    let init = GaussianBelief::diagonal(vec![0.3], &[0.01]).unwrap();
    let out = bound_trajectory(&contraction(), &init, &Controls::None, 4, &cfg).unwrap();
    assert!(out.schedule.radii().iter().all(|k| *k == cfg.grid[0]));
}

#[test]
fn schedule_probabilities_stay_below_epsilon() {
    let cfg = TubeConfig::default();
    let init = GaussianBelief::diagonal(vec![0.3], &[0.01]).unwrap();
    let out = bound_trajectory(&contraction(), &init, &Controls::None, 6, &cfg).unwrap();
    assert!(out.is_feasible());
    let ps: Vec<f64> = out.schedule.steps.iter().map(|s| s.p).collect();
    assert!(ps.iter().all(|p| *p < cfg.epsilon));
    assert!(ps.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn hand_computed_recursion() {
    assert!((propagate_probability(0.02, 0.05) - 0.069).abs() < 1e-15);
    assert_eq!(propagate_probability(0.0, 0.0), 0.0);
    assert_eq!(propagate_probability(1.0, 0.3), 1.0);
}

#[test]
fn entropy_integral_matches_quadrature() {
    let mut r = rng(23);
    for _ in 0..40 {
        let l = 10f64.powf(r.random_range(-1.0..1.0));
        let d = 10f64.powf(r.random_range(-2.0..0.5));
        let n = r.random_range(1..=4);
        let lambda = 10f64.powf(r.random_range(-3.0..0.5));
        let oracle = dudley_oracle(l, d, n, lambda);
        let adaptive = dudley_integral(l, d, n, lambda);
        assert!(adaptive >= oracle * (1.0 - 1e-12));
        assert!(adaptive <= oracle * 1.01, "{adaptive} vs {oracle}");
    }
}

proptest! {
    #[test]
    fn recursion_is_monotone_and_subadditive(p in 0.0f64..=1.0, q in 0.0f64..=1.0, dp in 0.0f64..0.5) {
        let next = propagate_probability(p, q);
        prop_assert!(next >= p.max(q) - 1e-15);
        prop_assert!(next <= (p + q).min(1.0) + 1e-15);
        prop_assert!(propagate_probability((p + dp).min(1.0), q) >= next);
        prop_assert!(propagate_probability(p, (q + dp).min(1.0)) >= next);
    }

    #[test]
    fn upper_sums_decrease_with_refinement(l in 0.1f64..10.0, d in 0.01f64..3.0, n in 1usize..5, lambda in 0.001f64..5.0) {
        let coarse = dudley_upper_sum(l, d, n, lambda, n as f64, 50);
        let fine = dudley_upper_sum(l, d, n, lambda, n as f64, 100);
        prop_assert!(fine <= coarse * (1.0 + 1e-12));
        prop_assert!(fine >= dudley_oracle(l, d, n, lambda) * (1.0 - 1e-12));
    }
}

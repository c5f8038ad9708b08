mod common;

use gptube::bounds::{
    mean_enclosure, mean_extrema, sup_abs_deviation, variance_upper, variance_upper_bound, BnbSettings, DomainControl,
    IntervalBox, SearchDomain, TAYLOR_ORDER,
};
use gptube::control::Policy;
use proptest::prelude::*;
use rand::Rng;

use common::{dense_grid, random_box, random_model, rng};

#[test]
fn extrema_bracket_grid_optima() {
    for seed in 0..20u64 {
        let dim = 1 + (seed % 2) as usize;
        let m = random_model(seed + 300, dim, 1, 12);
        let mut r = rng(seed);
        let b = random_box(&mut r, dim);
        let grid = dense_grid(&b, 2500);
        let gmax = grid.iter().map(|x| m.mean_dim(0, x)).fold(f64::NEG_INFINITY, f64::max);
        let gmin = grid.iter().map(|x| m.mean_dim(0, x)).fold(f64::INFINITY, f64::min);
        let vmax = grid
            .iter()
            .map(|x| m.variance_dim(0, x).unwrap())
            .fold(f64::NEG_INFINITY, f64::max);
        let e = mean_extrema(&m, &b, 0, 1e-6).unwrap();
        assert!(gmax <= e.max.hi && gmin >= e.min.lo, "seed {seed}");
        assert!(e.max.gap <= 1e-6 + 1e-4 * e.max.hi.abs());
        assert!(vmax <= variance_upper(&m, &b, 0, 1e-6).unwrap().hi, "seed {seed}");
    }
}

#[test]
fn deviation_bound_covers_the_l1_ball_under_a_policy() {
    let m = random_model(41, 3, 2, 20);
    let policy = Policy::linear(vec![vec![0.4, -0.3]]).unwrap();
    let state = IntervalBox::new(vec![-0.3, -0.2], vec![0.1, 0.3]).unwrap();
    let centre = vec![-0.1, 0.05];
    let domain = SearchDomain {
        state: state.clone(),
        control: DomainControl::Policy(&policy),
        l1_ball: Some((centre.clone(), 0.25)),
    };
    let g = [0.2, -0.1];
    let bound = sup_abs_deviation(&m, &domain, &g, &BnbSettings::with_tol(1e-6)).unwrap();
    let mut worst: f64 = 0.0;
    for x in state.grid(60) {
        if (x[0] - centre[0]).abs() + (x[1] - centre[1]).abs() > 0.25 {
            continue;
        }
        let input = domain.input_point(&x);
        let dev: f64 = (0..2).map(|i| (g[i] - m.mean_dim(i, &input)).abs()).sum();
        worst = worst.max(dev);
    }
    assert!(worst <= bound.hi, "{worst} > {}", bound.hi);
    assert!(bound.lo <= worst + 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn taylor_enclosures_hold_on_samples(seed in 0u64..500, lo in prop::collection::vec(-1.2f64..0.8, 2), w in 0.0f64..0.6) {
        let m = random_model(seed, 2, 1, 10);
        let b = IntervalBox::new(lo.clone(), lo.iter().map(|l| l + w).collect()).unwrap();
        let (mlo, mhi) = mean_enclosure(&m, 0, &b, TAYLOR_ORDER);
        let vhi = variance_upper_bound(&m, 0, &b, TAYLOR_ORDER);
        let mut r = rng(seed);
        for _ in 0..30 {
            let x: Vec<f64> = (0..2).map(|d| r.random_range(b.lower()[d]..=b.upper()[d])).collect();
            let mu = m.mean_dim(0, &x);
            prop_assert!(mlo <= mu && mu <= mhi);
            prop_assert!(m.variance_dim(0, &x).unwrap() <= vhi);
        }
    }

    #[test]
    fn bisection_partitions_the_box(lo in prop::collection::vec(-5.0f64..5.0, 3), w in prop::collection::vec(0.0f64..2.0, 3)) {
        let b = IntervalBox::new(lo.clone(), lo.iter().zip(&w).map(|(l, w)| l + w).collect()).unwrap();
        match b.bisect() {
            None => prop_assert_eq!(b.max_width(), 0.0),
            Some((a, c)) => {
                prop_assert!(b.contains_box(&a) && b.contains_box(&c));
                prop_assert!(a.max_width() <= b.max_width() && c.max_width() <= b.max_width());
                for x in b.grid(4) {
                    prop_assert!(a.contains(&x) || c.contains(&x));
                }
            }
        }
    }
}

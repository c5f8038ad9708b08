#![allow(dead_code)]

use gptube::bounds::IntervalBox;
use gptube::gp::{Dataset, GpModel, Hyperparams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small GP on `[-1, 1]^dim` with random targets and hyperparameters.
pub fn random_model(seed: u64, dim: usize, outputs: usize, points: usize) -> GpModel {
    let mut r = rng(seed);
    let inputs: Vec<Vec<f64>> = (0..points)
        .map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let targets = inputs
        .iter()
        .map(|_| (0..outputs).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let hyper = (0..outputs)
        .map(|_| {
            let ls = (0..dim).map(|_| r.random_range(0.3..1.2)).collect();
            let noise = 10f64.powf(r.random_range(-5.0..-2.0));
            Hyperparams::new(r.random_range(0.5..2.0), ls, noise).unwrap()
        })
        .collect();
    GpModel::new(Dataset::new(inputs, targets).unwrap(), hyper).unwrap()
}

/// Random sub-box of `[-1.5, 1.5]^dim`.
pub fn random_box(r: &mut ChaCha8Rng, dim: usize) -> IntervalBox {
    let lo: Vec<f64> = (0..dim).map(|_| r.random_range(-1.5..1.0)).collect();
    let hi = lo.iter().map(|l| l + r.random_range(0.1..1.0)).collect();
    IntervalBox::new(lo, hi).unwrap()
}

/// Regular grid with `total` points overall (rounded down per dimension).
pub fn dense_grid(b: &IntervalBox, total: usize) -> Vec<Vec<f64>> {
    let per_dim = (total as f64).powf(1.0 / b.dim() as f64).round() as usize;
    b.grid(per_dim)
}

/// Best value of `f` over a grid of about `total` points in `b`, refined by
/// repeatedly regridding the neighbouring cells of the best point.
pub fn grid_optimum<F: Fn(&[f64]) -> f64>(b: &IntervalBox, total: usize, f: F) -> f64 {
    let per_dim = (total as f64).powf(1.0 / b.dim() as f64).round() as usize;
    let mut region = b.clone();
    let mut best = f64::NEG_INFINITY;
    for _ in 0..4 {
        let (v, x) = dense_grid(&region, total)
            .into_iter()
            .map(|x| (f(&x), x))
            .max_by(|a, c| a.0.total_cmp(&c.0))
            .expect("non-empty grid");
        best = best.max(v);
        let cell: Vec<f64> = region.widths().map(|w| w / (per_dim - 1) as f64).collect();
        let lo = (0..b.dim()).map(|d| (x[d] - cell[d]).max(b.lower()[d])).collect();
        let hi = (0..b.dim()).map(|d| (x[d] + cell[d]).min(b.upper()[d])).collect();
        region = IntervalBox::new(lo, hi).expect("cell inside box");
    }
    best
}

/// Adaptive Simpson quadrature of `f` on `[a, b]`.
pub fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    fn step<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64, m: f64, fm: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        step(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1) + step(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, fa, b, fb, m, fm, whole, tol, 50)
}

/// `int_0^lambda sqrt(n ln(sqrt(N) L D / z + 1)) dz` with `N = n`, after
/// substituting `z = lambda t^2` to remove the singularity at zero.
pub fn dudley_oracle(l: f64, d: f64, n: usize, lambda: f64) -> f64 {
    let c = (n as f64).sqrt() * l * d;
    let nf = n as f64;
    let g = |t: f64| {
        if t <= 0.0 {
            return 0.0;
        }
        let z = lambda * t * t;
        2.0 * lambda * t * (nf * (c / z).ln_1p()).sqrt()
    };
    simpson(&g, 0.0, 1.0, 1e-13 * (1.0 + lambda * c))
}

/// Mean, variance and their standard errors from a sample.
pub struct SampleMoments {
    pub mean: f64,
    pub mean_se: f64,
    pub var: f64,
    pub var_se: f64,
}

pub fn sample_moments(xs: &[f64]) -> SampleMoments {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    SampleMoments {
        mean,
        mean_se: (m2 / n).sqrt(),
        var: m2 * n / (n - 1.0),
        var_se: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
    }
}

//! Taylor enclosures of the posterior over small boxes.
//!
//! Around a centre `c`, `f(c + sum_s d_s v_s)` splits into its Taylor
//! polynomial of order `p - 1` in `d` and a remainder built from order-`p`
//! derivatives along the directions `v_s`. Derivatives of the SE kernel along
//! arbitrary directions are multivariate Hermite polynomials, so the posterior
//! moments of every low-order derivative at `c` are available in closed form,
//! and the remainder is bounded through the prior alone.
//!
//! The kernel relaxation in [`super::relaxation`] bounds each training point
//! separately and then adds the pieces with the GP weights. When the Gram
//! matrix is badly conditioned those weights are huge and of mixed sign, and
//! the per-point slack swamps the answer. The enclosures here never split
//! the weighted sum, so they stay tight for nearly noise-free data.

use nalgebra::DVector;

use super::IntervalBox;
use crate::gp::{Dataset, GpModel, OutputGp};

/// Highest Taylor order tried by default.
pub const DEFAULT_ORDER: usize = 4;

/// Expansion point and directions: the region is `{c + sum_s d_s v_s : |d_s| <= half_s}`.
#[derive(Debug, Clone)]
pub struct Frame {
    pub centre: Vec<f64>,
    pub directions: Vec<Vec<f64>>,
    pub half: Vec<f64>,
    /// Input dimension of each direction when it is a coordinate axis.
    pub axis: Vec<Option<usize>>,
}

impl Frame {
    /// The box itself, expanded along its dimensions of positive width.
    pub fn axes(b: &IntervalBox) -> Self {
        let dims: Vec<usize> = (0..b.dim()).filter(|&d| b.width(d) > 0.0).collect();
        Self {
            centre: b.midpoint(),
            directions: dims
                .iter()
                .map(|&d| (0..b.dim()).map(|k| f64::from(u8::from(k == d))).collect())
                .collect(),
            half: dims.iter().map(|&d| 0.5 * b.width(d)).collect(),
            axis: dims.into_iter().map(Some).collect(),
        }
    }

    /// Inputs moving affinely with a state box: `x = centre + J (s - s_mid)`,
    /// where `J` is given column by column.
    pub fn along(centre: Vec<f64>, columns: Vec<Vec<f64>>, state: &IntervalBox) -> Self {
        let half = state.widths().map(|w| 0.5 * w).collect();
        let axis = vec![None; columns.len()];
        Self {
            centre,
            directions: columns,
            half,
            axis,
        }
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

/// Multisets of direction indices (non-decreasing lists), grouped by size.
fn multisets(n: usize, max_order: usize) -> Vec<Vec<Vec<usize>>> {
    let mut by_order: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new()]];
    for p in 1..=max_order {
        let mut next = Vec::new();
        for a in &by_order[p - 1] {
            let start = a.last().copied().unwrap_or(0);
            for s in start..n {
                let mut b = a.clone();
                b.push(s);
                next.push(b);
            }
        }
        by_order.push(next);
    }
    by_order
}

/// Sum over matchings of `items`: matched pairs contribute `pair(a, b)`,
/// unmatched items `single(a)` (perfect matchings only when `single` is `None`).
fn matchings(items: &[usize], pair: &dyn Fn(usize, usize) -> f64, single: Option<&dyn Fn(usize) -> f64>) -> f64 {
    let Some((&first, rest)) = items.split_first() else {
        return 1.0;
    };
    let mut total = match single {
        Some(f) => f(first) * matchings(rest, pair, single),
        None => 0.0,
    };
    for k in 0..rest.len() {
        let mut others = rest.to_vec();
        let partner = others.remove(k);
        total += pair(first, partner) * matchings(&others, pair, single);
    }
    total
}

fn factorial(a: usize) -> f64 {
    (1..=a).map(|k| k as f64).product()
}

/// `prod_s half_s^m_s / m_s!` for the multiplicities `m` of `alpha`.
fn monomial(half: &[f64], alpha: &[usize]) -> f64 {
    let mut out = 1.0;
    let mut k = 0;
    while k < alpha.len() {
        let s = alpha[k];
        let run = alpha[k..].iter().take_while(|&&v| v == s).count();
        out *= half[s].powi(run as i32) / factorial(run);
        k += run;
    }
    out
}

/// Kernel derivatives at the frame centre against every training point.
struct Columns<'a> {
    out: &'a OutputGp,
    base: Vec<f64>,
    /// `-v_s^T Lambda^-1 (c - x_j)` per point and direction.
    first: Vec<Vec<f64>>,
    /// `v_s^T Lambda^-1 v_t`.
    gram: Vec<Vec<f64>>,
}

impl<'a> Columns<'a> {
    fn new(out: &'a OutputGp, data: &Dataset, frame: &Frame) -> Self {
        let h = out.hyperparams();
        let inv_l2: Vec<f64> = h.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
        let scaled: Vec<Vec<f64>> = frame
            .directions
            .iter()
            .map(|v| v.iter().zip(&inv_l2).map(|(a, b)| a * b).collect())
            .collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let gram = scaled
            .iter()
            .map(|a| frame.directions.iter().map(|v| dot(a, v)).collect())
            .collect();
        let mut base = Vec::with_capacity(data.len());
        let mut first = Vec::with_capacity(data.len());
        for xj in data.inputs() {
            base.push(h.k(&frame.centre, xj));
            let r: Vec<f64> = frame.centre.iter().zip(xj).map(|(c, x)| c - x).collect();
            first.push(scaled.iter().map(|a| -dot(a, &r)).collect());
        }
        Self { out, base, first, gram }
    }

    /// `d^alpha k(c, x_j)` along the frame directions, for every training point.
    fn column(&self, alpha: &[usize]) -> DVector<f64> {
        let pair = |a: usize, b: usize| -self.gram[alpha[a]][alpha[b]];
        let positions: Vec<usize> = (0..alpha.len()).collect();
        DVector::from_iterator(
            self.base.len(),
            self.base.iter().zip(&self.first).map(|(b, f)| {
                let single = |a: usize| f[alpha[a]];
                b * matchings(&positions, &pair, Some(&single))
            }),
        )
    }

    /// Prior standard deviation of `d^alpha f`, the same at every point.
    fn prior_sd(&self, alpha: &[usize]) -> f64 {
        let doubled: Vec<usize> = alpha.iter().chain(alpha).copied().collect();
        let positions: Vec<usize> = (0..doubled.len()).collect();
        let pair = |a: usize, b: usize| self.gram[doubled[a]][doubled[b]];
        let var = self.out.hyperparams().signal_variance * matchings(&positions, &pair, None);
        var.max(0.0).sqrt()
    }
}

/// First-order model of the posterior mean over a frame:
/// `|mean(c + sum_s d_s v_s) - value - gradient . d| <= radius`.
#[derive(Debug, Clone)]
pub struct MeanLinearization {
    pub value: f64,
    /// Derivative along each frame direction.
    pub gradient: Vec<f64>,
    pub radius: f64,
    /// `|mean - value|` bound over the whole frame.
    pub half_width: f64,
}

impl MeanLinearization {
    pub fn enclosure(&self) -> (f64, f64) {
        (self.value - self.half_width, self.value + self.half_width)
    }
}

/// Taylor model of the posterior mean of output `dim`.
///
/// The remainder uses `|d^alpha mean| <= ||mean||_H * sd(d^alpha f)` with the
/// RKHS norm bounded by `y^T (K + sigma_n^2 I)^-1 y`.
pub fn mean_linearization(m: &GpModel, dim: usize, frame: &Frame, max_order: usize) -> MeanLinearization {
    let max_order = max_order.max(1);
    let out = m.output(dim);
    let data = m.dataset();
    let idx = multisets(frame.len(), max_order);
    let cols = Columns::new(out, data, frame);
    let w = out.weights();
    let rkhs = data.target_column(dim).dot(w).max(0.0).sqrt() * (1.0 + 1e-12);

    let value = cols.column(&[]).dot(w);
    let remainder = |p: usize| -> f64 {
        idx[p]
            .iter()
            .map(|a| rkhs * cols.prior_sd(a) * monomial(&frame.half, a))
            .sum()
    };

    let mut gradient = vec![0.0; frame.len()];
    let mut first = 0.0;
    if max_order > 1 {
        for (s, g) in gradient.iter_mut().enumerate() {
            *g = cols.column(&[s]).dot(w);
            first += g.abs() * frame.half[s];
        }
    }

    let mut higher = 0.0;
    let mut radius = f64::INFINITY;
    for p in 2..=max_order {
        radius = radius.min(higher + remainder(p));
        if p < max_order {
            higher += idx[p]
                .iter()
                .map(|a| cols.column(a).dot(w).abs() * monomial(&frame.half, a))
                .sum::<f64>();
        }
    }
    let pad = 64.0 * f64::EPSILON * (value.abs() + first + radius.min(1e300));
    let radius = radius + pad;
    MeanLinearization {
        value,
        half_width: remainder(1).min(first + radius) + pad,
        gradient,
        radius,
    }
}

/// Enclosure `[lo, hi]` of the posterior mean of output `dim` over `b`.
pub fn mean_enclosure(m: &GpModel, dim: usize, b: &IntervalBox, max_order: usize) -> (f64, f64) {
    mean_linearization(m, dim, &Frame::axes(b), max_order).enclosure()
}

/// Upper bound on the latent posterior variance of output `dim` over a frame.
///
/// By Minkowski, the posterior standard deviation at a frame point is at
/// most the sum of posterior standard deviations of the Taylor terms plus
/// prior standard deviations of the remainder terms.
pub fn variance_upper_in_frame(m: &GpModel, dim: usize, frame: &Frame, max_order: usize) -> f64 {
    let max_order = max_order.max(1);
    let out = m.output(dim);
    let data = m.dataset();
    let sf2 = out.hyperparams().signal_variance;
    let idx = multisets(frame.len(), max_order);
    let cols = Columns::new(out, data, frame);
    let pad = 4.0 * (data.len() as f64 + 16.0) * f64::EPSILON;

    let mut sum = 0.0;
    let mut best = f64::INFINITY;
    for p in 0..=max_order {
        if p > 0 {
            let rem: f64 = idx[p].iter().map(|a| cols.prior_sd(a) * monomial(&frame.half, a)).sum();
            best = best.min(sum + rem);
        }
        if p < max_order {
            sum += idx[p]
                .iter()
                .map(|a| {
                    let prior = cols.prior_sd(a).powi(2);
                    let explained = out.whiten(&cols.column(a)).norm_squared();
                    (prior - explained + pad * prior).max(0.0).sqrt() * monomial(&frame.half, a)
                })
                .sum::<f64>();
        }
    }
    (best * best).min(sf2)
}

/// Upper bound on the latent posterior variance of output `dim` over `b`.
pub fn variance_upper_bound(m: &GpModel, dim: usize, b: &IntervalBox, max_order: usize) -> f64 {
    variance_upper_in_frame(m, dim, &Frame::axes(b), max_order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{Dataset, Hyperparams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64, dim: usize, noise: f64) -> GpModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let targets = inputs.iter().map(|x| vec![x.iter().map(|v| (2.0 * v).sin()).sum()]).collect();
        let h = Hyperparams::new(1.3, (0..dim).map(|d| 0.5 + 0.3 * d as f64).collect(), noise).unwrap();
        GpModel::new(Dataset::new(inputs, targets).unwrap(), vec![h]).unwrap()
    }

    #[test]
    fn multisets_are_complete_and_distinct() {
        let idx = multisets(3, 4);
        let counts: Vec<usize> = idx.iter().map(Vec::len).collect();
        assert_eq!(counts, vec![1, 3, 6, 10, 15]);
        for (p, list) in idx.iter().enumerate() {
            for (i, a) in list.iter().enumerate() {
                assert_eq!(a.len(), p);
                assert!(!list[..i].contains(a));
            }
        }
    }

    #[test]
    fn derivative_column_matches_finite_differences() {
        let m = model(3, 2, 1e-4);
        let out = m.output(0);
        let c = [0.2, -0.1];
        let b = IntervalBox::new(vec![0.1, -0.3], vec![0.3, 0.1]).unwrap();
        let cols = Columns::new(out, m.dataset(), &Frame::axes(&b));
        let e = 1e-5;
        let kc = |x: &[f64]| out.kernel_column(m.dataset(), x);
        let fd = (kc(&[c[0] + e, c[1]]) - kc(&[c[0] - e, c[1]])) / (2.0 * e);
        assert!((cols.column(&[0]) - fd).amax() < 1e-7);
        let fd2 = (kc(&[c[0], c[1] + e]) - 2.0 * kc(&c) + kc(&[c[0], c[1] - e])) / (e * e);
        assert!((cols.column(&[1, 1]) - fd2).amax() < 1e-4);
    }

    #[test]
    fn enclosures_contain_sampled_values() {
        for seed in 0..6 {
            let dim = 1 + (seed as usize % 2);
            let m = model(seed, dim, 1e-6);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            for _ in 0..10 {
                let lo: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.2..0.8)).collect();
                let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.0..0.4)).collect();
                let b = IntervalBox::new(lo, hi).unwrap();
                let (mlo, mhi) = mean_enclosure(&m, 0, &b, DEFAULT_ORDER);
                let vhi = variance_upper_bound(&m, 0, &b, DEFAULT_ORDER);
                for x in b.grid(15) {
                    let mu = m.mean_dim(0, &x);
                    let var = m.variance_dim(0, &x).unwrap();
                    assert!(mlo <= mu && mu <= mhi, "mean {mu} outside [{mlo}, {mhi}]");
                    assert!(var <= vhi, "variance {var} above {vhi}");
                }
            }
        }
    }

    #[test]
    fn point_box_is_nearly_exact() {
        let m = model(7, 2, 1e-6);
        let x = [0.1, 0.3];
        let b = IntervalBox::point(&x).unwrap();
        let (lo, hi) = mean_enclosure(&m, 0, &b, DEFAULT_ORDER);
        let mu = m.mean_dim(0, &x);
        assert!(hi - lo < 1e-12 * (1.0 + mu.abs()));
        let v = m.variance_dim(0, &x).unwrap();
        let up = variance_upper_bound(&m, 0, &b, DEFAULT_ORDER);
        assert!(up >= v && up - v < 1e-9, "{v} vs {up}");
    }

    #[test]
    fn mapped_frame_encloses_the_closed_loop() {
        let m = model(11, 3, 1e-6);
        let gain = [0.7, -0.4];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let lo: Vec<f64> = (0..2).map(|_| rng.random_range(-0.8..0.4)).collect();
            let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.0..0.3)).collect();
            let s = IntervalBox::new(lo, hi).unwrap();
            let lift = |x: &[f64]| vec![x[0], x[1], gain[0] * x[0] + gain[1] * x[1]];
            let columns = vec![vec![1.0, 0.0, gain[0]], vec![0.0, 1.0, gain[1]]];
            let frame = Frame::along(lift(&s.midpoint()), columns, &s);
            let lin = mean_linearization(&m, 0, &frame, DEFAULT_ORDER);
            let (mlo, mhi) = lin.enclosure();
            let vhi = variance_upper_in_frame(&m, 0, &frame, DEFAULT_ORDER);
            let mid = s.midpoint();
            for x in s.grid(15) {
                let p = lift(&x);
                let mu = m.mean_dim(0, &p);
                let affine = lin.value + lin.gradient[0] * (x[0] - mid[0]) + lin.gradient[1] * (x[1] - mid[1]);
                assert!(mlo <= mu && mu <= mhi, "mean {mu} outside [{mlo}, {mhi}]");
                assert!((mu - affine).abs() <= lin.radius, "linear model off by {}", (mu - affine).abs());
                assert!(m.variance_dim(0, &p).unwrap() <= vhi);
            }
        }
    }
}

//! Canonical-metric quantities of the posterior process over a box.
//!
//! `d(x1, x2)^2 = Var[f(x1) - f(x2)]` under the posterior of one output.

use nalgebra::DVector;

use super::extrema::variance_upper;
use super::relaxation::z_range;
use super::IntervalBox;
use crate::error::{check_dim, Result};
use crate::gp::GpModel;

/// Upper bound on `1/2 sup_{x1, x2 in b} d(x1, x2)`, using `xi_upper >= sup_b Var[f(x)]`.
///
/// Two bounds are combined. Conditioning never increases the variance of an
/// increment, so `d^2 <= 2 sf2 (1 - exp(-r^2/2))` with `r^2` the scaled squared
/// box diagonal. The triangle inequality in L2 gives `d <= 2 sqrt(xi_upper)`.
pub fn canonical_metric_diameter_with(m: &GpModel, b: &IntervalBox, dim: usize, xi_upper: f64) -> Result<f64> {
    check_dim(m.input_dim(), b.dim())?;
    let h = m.output(dim).hyperparams();
    let r2: f64 = h
        .lengthscales
        .iter()
        .zip(b.widths())
        .map(|(l, w)| (w / l) * (w / l))
        .sum();
    let prior = 0.5 * (2.0 * h.signal_variance * -(-0.5 * r2).exp_m1()).sqrt();
    Ok(prior.min(xi_upper.max(0.0).sqrt()))
}

/// Half-diameter of `b` under the canonical metric of output `dim`.
pub fn canonical_metric_diameter(m: &GpModel, b: &IntervalBox, dim: usize) -> Result<f64> {
    check_dim(m.input_dim(), b.dim())?;
    if b.max_width() == 0.0 {
        return Ok(0.0);
    }
    let sf2 = m.output(dim).hyperparams().signal_variance;
    let xi = variance_upper(m, b, dim, 1e-6 * sf2)?;
    canonical_metric_diameter_with(m, b, dim, xi.hi)
}

/// Lipschitz constant of `d(x1, .)` on `b` with respect to the Euclidean norm.
///
/// `d(x, y) <= sqrt(sup_b tr Cov[grad f])  |x - y|`, and the trace is bounded by
/// `sum_d sf2/l_d^2 - q_d` where `q_d` is a certified lower bound of the
/// explained part `dk_d^T K^-1 dk_d` of the derivative variance. Falls back to the
/// prior constant `sf / l_min` whenever that is smaller.
pub fn metric_lipschitz(m: &GpModel, b: &IntervalBox, dim: usize) -> Result<f64> {
    check_dim(m.input_dim(), b.dim())?;
    let out = m.output(dim);
    let h = out.hyperparams();
    let data = m.dataset();
    let prior = h.signal_std() / h.min_lengthscale();
    let mid = b.midpoint();

    // Kernel value ranges over the box, shared by all derivative directions.
    let k_range: Vec<(f64, f64)> = data
        .inputs()
        .map(|xj| {
            let (lo, hi) = z_range(h, xj, b);
            (h.profile(hi), h.profile(lo))
        })
        .collect();
    let k_mid = out.kernel_column(data, &mid);

    let mut trace = 0.0;
    for (d, l) in h.lengthscales.iter().enumerate() {
        let inv_l2 = 1.0 / (l * l);
        let prior_d = h.signal_variance * inv_l2;
        // Tangent of the convex form q(v) = v^T K^-1 v at the centre derivative v0.
        let v0 = DVector::from_iterator(
            data.len(),
            data.inputs().zip(k_mid.iter()).map(|(xj, k)| -k * (mid[d] - xj[d]) * inv_l2),
        );
        let g = out.solve(&v0);
        let q0 = g.dot(&v0);
        let mut lin = 0.0;
        let mut magnitude = 0.0;
        for (j, xj) in data.inputs().enumerate() {
            let (k_lo, k_hi) = k_range[j];
            let (a, c) = (b.lower()[d] - xj[d], b.upper()[d] - xj[d]);
            // v_j = -k * delta / l^2 with k in [k_lo, k_hi], delta in [a, c].
            let prods = [k_lo * a, k_lo * c, k_hi * a, k_hi * c];
            let p_lo = prods.iter().copied().fold(f64::INFINITY, f64::min);
            let p_hi = prods.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (v_lo, v_hi) = (-p_hi * inv_l2, -p_lo * inv_l2);
            let gj = 2.0 * g[j];
            lin += (gj * v_lo).min(gj * v_hi);
            magnitude += gj.abs() * v_lo.abs().max(v_hi.abs());
        }
        let q_lower = (lin - q0 - 64.0 * f64::EPSILON * (magnitude + q0.abs())).max(0.0);
        trace += (prior_d - q_lower).max(0.0);
    }
    Ok(prior.min(trace.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{Dataset, Hyperparams};

    fn model() -> GpModel {
        let xs: Vec<Vec<f64>> = (0..7).map(|k| vec![-1.5 + 0.5 * k as f64]).collect();
        let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![(2.0 * x[0]).sin()]).collect();
        let h = Hyperparams::isotropic(1.3, 0.7, 1e-3, 1).unwrap();
        GpModel::new(Dataset::new(xs, ys).unwrap(), vec![h]).unwrap()
    }

    #[test]
    fn zero_width_box_has_zero_diameter() {
        let m = model();
        let b = IntervalBox::point(&[0.3]).unwrap();
        assert_eq!(canonical_metric_diameter(&m, &b, 0).unwrap(), 0.0);
    }

    #[test]
    fn diameter_respects_variance_bound() {
        let m = model();
        let b = IntervalBox::new(vec![-0.4], vec![0.9]).unwrap();
        let lam = canonical_metric_diameter(&m, &b, 0).unwrap();
        let xi = variance_upper(&m, &b, 0, 1e-8).unwrap().hi;
        assert!(lam <= (2.0 * xi).sqrt() + 1e-12);
    }

    #[test]
    fn lipschitz_grows_with_box() {
        let m = model();
        let mut last = 0.0;
        for r in [0.0, 0.05, 0.2, 0.5, 1.0, 3.0] {
            let b = IntervalBox::around(&[0.2], r).unwrap();
            let l = metric_lipschitz(&m, &b, 0).unwrap();
            assert!(l >= last - 1e-12, "r={r}: {l} < {last}");
            last = l;
        }
        let h = m.output(0).hyperparams();
        assert!(last <= h.signal_std() / h.min_lengthscale() + 1e-12);
    }

    #[test]
    fn tiny_signal_gives_tiny_lipschitz() {
        let xs = vec![vec![0.0], vec![1.0]];
        let ys = vec![vec![0.0], vec![0.0]];
        let h = Hyperparams::isotropic(1e-12, 1.0, 1e-3, 1).unwrap();
        let m = GpModel::new(Dataset::new(xs, ys).unwrap(), vec![h]).unwrap();
        let b = IntervalBox::new(vec![-1.0], vec![2.0]).unwrap();
        assert!(metric_lipschitz(&m, &b, 0).unwrap() < 1e-5);
    }
}

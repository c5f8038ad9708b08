//! Linear kernel bounds and their exact minimization over a box.
//!
//! The SE kernel is `k = sf2 * exp(-z/2)` with `z = sum_d (x_d - x_jd)^2 / l_d^2`,
//! a convex function of the scalar `z`. Over the range of `z` reachable in a
//! box, any tangent is a lower bound and the chord is an upper bound. A
//! weighted sum of such lines is a separable quadratic in `x`, so its minimum
//! over the box is found coordinate by coordinate in closed form.

use serde::{Deserialize, Serialize};

use super::IntervalBox;
use crate::gp::{GpModel, Hyperparams};

/// Bounds `lower_intercept + lower_slope * z <= k <= upper_intercept + upper_slope * z`,
/// valid for `z` in `[z_min, z_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearKernelBounds {
    pub lower_intercept: f64,
    pub lower_slope: f64,
    pub upper_intercept: f64,
    pub upper_slope: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl LinearKernelBounds {
    /// Tangent at the midpoint of the reachable range, chord through its ends.
    pub fn new(h: &Hyperparams, z_min: f64, z_max: f64) -> Self {
        let k_lo = h.profile(z_min);
        let k_hi = h.profile(z_max);
        let z_mid = 0.5 * (z_min + z_max);
        let k_mid = h.profile(z_mid);
        let lower_slope = -0.5 * k_mid;
        let lower_intercept = k_mid - lower_slope * z_mid;
        let (upper_intercept, upper_slope) = if z_max > z_min {
            let s = (k_hi - k_lo) / (z_max - z_min);
            (k_lo - s * z_min, s)
        } else {
            (k_lo, 0.0)
        };
        Self {
            lower_intercept,
            lower_slope,
            upper_intercept,
            upper_slope,
            z_min,
            z_max,
        }
    }

    pub fn lower_at(&self, z: f64) -> f64 {
        self.lower_intercept + self.lower_slope * z
    }

    pub fn upper_at(&self, z: f64) -> f64 {
        self.upper_intercept + self.upper_slope * z
    }
}

/// Range of the scaled squared distance to `xj` over the box (exact).
pub fn z_range(h: &Hyperparams, xj: &[f64], b: &IntervalBox) -> (f64, f64) {
    let mut lo = 0.0;
    let mut hi = 0.0;
    for (d, l) in h.lengthscales.iter().enumerate() {
        let a = b.lower()[d] - xj[d];
        let c = b.upper()[d] - xj[d];
        let inv = 1.0 / (l * l);
        let near = if a > 0.0 {
            a * a
        } else if c < 0.0 {
            c * c
        } else {
            0.0
        };
        lo += near * inv;
        hi += (a * a).max(c * c) * inv;
    }
    (lo, hi)
}

/// Linear bounds on `k_dim(x, x_j)` valid for every `x` in the box.
pub fn kernel_linear_bounds(m: &GpModel, j: usize, b: &IntervalBox, dim: usize) -> LinearKernelBounds {
    let h = m.output(dim).hyperparams();
    let (lo, hi) = z_range(h, m.dataset().input(j), b);
    LinearKernelBounds::new(h, lo, hi)
}

/// Result of minimizing the relaxation of `sum_j w_j k(x, x_j)` over a box.
#[derive(Debug, Clone)]
pub struct RelaxedMin {
    /// Certified lower bound on the minimum.
    pub value: f64,
    /// Minimizer of the relaxation (a point of the box).
    pub argmin: Vec<f64>,
}

/// Lower bound on `min_{x in b} sum_j weights[j] * k(x, x_j)`.
pub fn relaxed_min(m: &GpModel, dim: usize, weights: &[f64], b: &IntervalBox) -> RelaxedMin {
    let h = m.output(dim).hyperparams();
    let data = m.dataset();
    let nd = b.dim();
    let mid = b.midpoint();
    let inv_l2: Vec<f64> = h.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();

    // Per dim: A y^2 + B y + C with y = x_d - mid_d.
    let mut quad = vec![0.0; nd];
    let mut lin = vec![0.0; nd];
    let mut cst = vec![0.0; nd];
    let mut constant = 0.0;
    let mut magnitude = 0.0;

    for (j, xj) in data.inputs().enumerate() {
        let w = weights[j];
        if w == 0.0 {
            continue;
        }
        let (z_lo, z_hi) = z_range(h, xj, b);
        let lb = LinearKernelBounds::new(h, z_lo, z_hi);
        let (a, s) = if w > 0.0 {
            (lb.lower_intercept, lb.lower_slope)
        } else {
            (lb.upper_intercept, lb.upper_slope)
        };
        constant += w * a;
        let c = w * s;
        magnitude += w.abs() * (a.abs() + s.abs() * z_hi);
        if c == 0.0 {
            continue;
        }
        for d in 0..nd {
            let delta = mid[d] - xj[d];
            let cd = c * inv_l2[d];
            quad[d] += cd;
            lin[d] += 2.0 * cd * delta;
            cst[d] += cd * delta * delta;
        }
    }

    let mut value = constant;
    let mut argmin = Vec::with_capacity(nd);
    for d in 0..nd {
        let half = 0.5 * b.width(d);
        let f = |y: f64| (quad[d] * y + lin[d]) * y + cst[d];
        let mut best_y = -half;
        let mut best = f(-half);
        let right = f(half);
        if right < best {
            best = right;
            best_y = half;
        }
        if quad[d] > 0.0 {
            let y = -lin[d] / (2.0 * quad[d]);
            if y > -half && y < half {
                let v = f(y);
                if v < best {
                    best = v;
                    best_y = y;
                }
            }
        }
        value += best;
        argmin.push((mid[d] + best_y).clamp(b.lower()[d], b.upper()[d]));
    }

    // Rounding allowance for the accumulated sums.
    value -= 64.0 * f64::EPSILON * (magnitude + constant.abs());
    RelaxedMin { value, argmin }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::Dataset;

    fn model_1d() -> GpModel {
        let xs: Vec<Vec<f64>> = vec![vec![-1.3], vec![-0.2], vec![0.4], vec![1.7]];
        let ys: Vec<Vec<f64>> = vec![vec![0.5], vec![-1.0], vec![0.8], vec![0.1]];
        let h = Hyperparams::isotropic(1.2, 0.6, 1e-4, 1).unwrap();
        GpModel::new(Dataset::new(xs, ys).unwrap(), vec![h]).unwrap()
    }

    #[test]
    fn point_box_bounds_touch() {
        let m = model_1d();
        let b = IntervalBox::point(&[0.3]).unwrap();
        for j in 0..4 {
            let lb = kernel_linear_bounds(&m, j, &b, 0);
            let k = m.output(0).hyperparams().k(&[0.3], m.dataset().input(j));
            assert!((lb.lower_at(lb.z_min) - k).abs() < 1e-14);
            assert!((lb.upper_at(lb.z_min) - k).abs() < 1e-14);
        }
    }

    #[test]
    fn tangent_touches_at_its_point() {
        let h = Hyperparams::isotropic(2.0, 1.0, 0.0, 1).unwrap();
        let lb = LinearKernelBounds::new(&h, 0.0, 0.0);
        assert_eq!(lb.lower_at(0.0), 2.0);
        let lb = LinearKernelBounds::new(&h, 0.4, 0.4);
        assert!((lb.lower_at(0.4) - h.profile(0.4)).abs() < 1e-15);
    }

    #[test]
    fn relaxation_is_below_function_on_grid() {
        let m = model_1d();
        let b = IntervalBox::new(vec![-0.7], vec![0.9]).unwrap();
        let w = [0.7, -1.3, 2.0, -0.4];
        let r = relaxed_min(&m, 0, &w, &b);
        let h = m.output(0).hyperparams();
        for p in b.grid(500) {
            let v: f64 = (0..4).map(|j| w[j] * h.k(&p, m.dataset().input(j))).sum();
            assert!(r.value <= v, "{} > {}", r.value, v);
        }
        assert!(b.contains(&r.argmin));
    }

    #[test]
    fn z_range_is_exact_in_2d() {
        let h = Hyperparams::new(1.0, vec![0.5, 2.0], 0.0).unwrap();
        let b = IntervalBox::new(vec![0.0, -1.0], vec![1.0, 1.0]).unwrap();
        let (lo, hi) = z_range(&h, &[1.5, 0.0], &b);
        assert!((lo - 0.25 / 0.25).abs() < 1e-15);
        assert!((hi - (2.25 / 0.25 + 1.0 / 4.0)).abs() < 1e-15);
    }
}

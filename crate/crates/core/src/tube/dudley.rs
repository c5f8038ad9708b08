//! Entropy integral `int_0^lambda sqrt(ln((sqrt(N) L D / z + 1)^n)) dz`.

use statrs::function::erf::erfc;

/// Panel count at which refinement stops regardless of convergence.
pub const MAX_PANELS: usize = 10_000;

const REL_TOL: f64 = 1e-4;

fn check(l: f64, d: f64, lambda: f64) {
    debug_assert!(l >= 0.0 && d >= 0.0 && lambda >= 0.0, "negative Dudley argument");
}

/// Certified upper bound on the integral with `N = n`.
pub fn dudley_integral(l: f64, d: f64, n: usize, lambda: f64) -> f64 {
    dudley_integral_with(l, d, n, lambda, n as f64)
}

/// Certified upper bound on the integral with an explicit covering constant `N`.
///
/// Panels are doubled until two consecutive sums differ by less than `1e-4`
/// relative, or [`MAX_PANELS`] is reached. Every sum is an upper bound, so the
/// last one is returned.
pub fn dudley_integral_with(l: f64, d: f64, n: usize, lambda: f64, cover_n: f64) -> f64 {
    check(l, d, lambda);
    if lambda <= 0.0 || n == 0 {
        return 0.0;
    }
    let mut panels = 1;
    let mut prev = dudley_upper_sum(l, d, n, lambda, cover_n, panels);
    loop {
        let next_panels = (panels * 2).min(MAX_PANELS);
        let next = dudley_upper_sum(l, d, n, lambda, cover_n, next_panels);
        let done = (prev - next).abs() <= REL_TOL * next.abs() || next_panels == MAX_PANELS;
        prev = next;
        panels = next_panels;
        if done {
            return prev;
        }
    }
}

/// Upper sum with `panels` equal panels.
///
/// The first panel `[0, h]` uses the exact integral of the larger integrand
/// `sqrt(n ln((c + h) / z))`; the remaining panels take the left endpoint of
/// the decreasing integrand.
pub fn dudley_upper_sum(l: f64, d: f64, n: usize, lambda: f64, cover_n: f64, panels: usize) -> f64 {
    check(l, d, lambda);
    if lambda <= 0.0 || n == 0 {
        return 0.0;
    }
    let c = cover_n.max(0.0).sqrt() * l * d;
    if c <= 0.0 {
        return 0.0;
    }
    let panels = panels.max(1);
    let nf = n as f64;
    let h = lambda / panels as f64;
    let integrand = |z: f64| (nf * (c / z).ln_1p()).sqrt();

    let s = (c / h).ln_1p();
    let a = c + h;
    let first = nf.sqrt() * (h * s.sqrt() + a * 0.5 * std::f64::consts::PI.sqrt() * erfc(s.sqrt()));
    let rest: f64 = (1..panels).map(|k| integrand(k as f64 * h)).sum::<f64>() * h;
    first + rest
}

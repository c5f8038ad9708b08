use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::bnb::{maximize, BnbOutcome, BnbSettings, NodeBound};
use super::relaxation::relaxed_min;
use super::taylor::MeanLinearization;
use super::taylor::{mean_linearization, variance_upper_in_frame, Frame, DEFAULT_ORDER};
use super::IntervalBox;
use crate::control::{Policy, PolicyKind};
use crate::error::{check_dim, Error, Result};
use crate::gp::GpModel;

/// Enclosure `[lo, hi]` of an extremum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifiedInterval {
    pub lo: f64,
    pub hi: f64,
    pub gap: f64,
    pub budget_exceeded: bool,
}

impl CertifiedInterval {
    fn from_max(o: &BnbOutcome) -> Self {
        Self {
            lo: o.lower,
            hi: o.upper,
            gap: o.upper - o.lower,
            budget_exceeded: o.budget_exceeded,
        }
    }

    fn from_min(o: &BnbOutcome) -> Self {
        Self {
            lo: -o.upper,
            hi: -o.lower,
            gap: o.upper - o.lower,
            budget_exceeded: o.budget_exceeded,
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanExtrema {
    pub min: CertifiedInterval,
    pub max: CertifiedInterval,
}

/// How the control part of the GP input is formed from a state box.
#[derive(Debug, Clone)]
pub enum DomainControl<'a> {
    /// The searched box already is the full GP input.
    None,
    Fixed(Vec<f64>),
    Policy(&'a Policy),
}

/// Region searched by branch and bound.
///
/// Splitting happens over the state box only. Controls are appended either as
/// a fixed vector or as the policy range over the current sub-box, so closed
/// loop bounding does not enlarge the search space. An optional L1 ball
/// discards sub-boxes that cannot contain points of the ball.
#[derive(Debug, Clone)]
pub struct SearchDomain<'a> {
    pub state: IntervalBox,
    pub control: DomainControl<'a>,
    pub l1_ball: Option<(Vec<f64>, f64)>,
}

impl<'a> SearchDomain<'a> {
    pub fn plain(b: IntervalBox) -> Self {
        Self {
            state: b,
            control: DomainControl::None,
            l1_ball: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.state.dim()
            + match &self.control {
                DomainControl::None => 0,
                DomainControl::Fixed(u) => u.len(),
                DomainControl::Policy(p) => p.control_dim(),
            }
    }

    pub fn input_box(&self, s: &IntervalBox) -> IntervalBox {
        match &self.control {
            DomainControl::None => s.clone(),
            DomainControl::Fixed(u) => s.concat(&IntervalBox::point(u).expect("finite control")),
            DomainControl::Policy(p) => s.concat(&p.extrema_unchecked(s)),
        }
    }

    pub fn full_input_box(&self) -> IntervalBox {
        self.input_box(&self.state)
    }

    pub fn input_point(&self, x: &[f64]) -> Vec<f64> {
        let mut v = x.to_vec();
        match &self.control {
            DomainControl::None => {}
            DomainControl::Fixed(u) => v.extend_from_slice(u),
            DomainControl::Policy(p) => v.extend(p.eval_unchecked(x)),
        }
        v
    }

    /// Expansion frame for Taylor models over the node `s`. With a linear
    /// policy the input moves affinely with the state, so the frame follows
    /// the state directions instead of the product input box.
    fn frame(&self, s: &IntervalBox, bx: &IntervalBox) -> Frame {
        match &self.control {
            DomainControl::Policy(p) if p.kind == PolicyKind::Linear => {
                let n = s.dim();
                let columns = (0..n)
                    .map(|c| (0..n).map(|r| f64::from(u8::from(r == c))).chain(p.gain.iter().map(|row| row[c])).collect())
                    .collect();
                Frame::along(self.input_point(&s.midpoint()), columns, s)
            }
            _ => Frame::axes(bx),
        }
    }

    fn in_ball(&self, x: &[f64]) -> bool {
        match &self.l1_ball {
            None => true,
            Some((c, r)) => x.iter().zip(c).map(|(a, b)| (a - b).abs()).sum::<f64>() <= *r,
        }
    }

    fn admits(&self, s: &IntervalBox) -> bool {
        match &self.l1_ball {
            None => true,
            Some((c, r)) => s.l1_distance(c) <= *r,
        }
    }

    /// Feasible states of the sub-box worth evaluating.
    fn candidates(&self, s: &IntervalBox, extra: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(2);
        let mid = s.midpoint();
        if self.in_ball(&mid) {
            out.push(mid);
        } else if let Some((c, _)) = &self.l1_ball {
            // Nearest box point to the centre lies in the ball whenever the box is admitted.
            out.push(s.clamp(c));
        }
        let e = s.clamp(&extra[..s.dim()]);
        if self.in_ball(&e) {
            out.push(e);
        }
        out
    }

    fn validate(&self, m: &GpModel) -> Result<()> {
        check_dim(m.input_dim(), self.input_dim())?;
        if let DomainControl::Policy(p) = &self.control {
            check_dim(self.state.dim(), p.state_dim())?;
        }
        if let Some((c, r)) = &self.l1_ball {
            check_dim(self.state.dim(), c.len())?;
            if !(*r >= 0.0) {
                return Err(Error::InvalidArgument("negative ball radius".into()));
            }
        }
        if !self.admits(&self.state) {
            return Err(Error::InvalidArgument("search box does not meet the L1 ball".into()));
        }
        Ok(())
    }
}

fn check_output(m: &GpModel, dim: usize) -> Result<()> {
    if dim < m.output_dim() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "output index {dim} out of range for {} outputs",
            m.output_dim()
        )))
    }
}

fn check_tol(tol: f64) -> Result<()> {
    if tol > 0.0 && tol.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("tolerance must be positive, got {tol}")))
    }
}

/// Certified minimum and maximum of the posterior mean of output `dim` over `b`.
pub fn mean_extrema(m: &GpModel, b: &IntervalBox, dim: usize, tol: f64) -> Result<MeanExtrema> {
    check_tol(tol)?;
    mean_extrema_in(m, &SearchDomain::plain(b.clone()), dim, &BnbSettings::with_tol(tol))
}

pub fn mean_extrema_in(m: &GpModel, domain: &SearchDomain, dim: usize, settings: &BnbSettings) -> Result<MeanExtrema> {
    domain.validate(m)?;
    check_output(m, dim)?;
    let alpha: Vec<f64> = m.output(dim).weights().iter().copied().collect();
    let neg_alpha: Vec<f64> = alpha.iter().map(|a| -a).collect();

    let run = |w: &[f64], sign: f64| -> BnbOutcome {
        // Maximizes -sign * mean, i.e. sign = 1 finds the minimum.
        maximize(domain.state.clone(), settings, |s| {
            if !domain.admits(s) {
                return None;
            }
            let bx = domain.input_box(s);
            let relax = relaxed_min(m, dim, w, &bx);
            let mut best: Option<(Vec<f64>, f64)> = None;
            for c in domain.candidates(s, &relax.argmin) {
                let v = -sign * m.mean_dim(dim, &domain.input_point(&c));
                if best.as_ref().is_none_or(|b| v > b.1) {
                    best = Some((c, v));
                }
            }
            let (candidate, candidate_value) = best?;
            let (lo, hi) = mean_linearization(m, dim, &domain.frame(s, &bx), DEFAULT_ORDER).enclosure();
            let taylor = if sign > 0.0 { -lo } else { hi };
            Some(NodeBound {
                upper: (-relax.value).min(taylor),
                candidate,
                candidate_value,
            })
        })
        .expect("root box admitted")
    };

    let min = run(&alpha, 1.0);
    let max = run(&neg_alpha, -1.0);
    Ok(MeanExtrema {
        min: CertifiedInterval::from_min(&min),
        max: CertifiedInterval::from_max(&max),
    })
}

/// Certified maximum of the latent posterior variance of output `dim` over `b`.
pub fn variance_upper(m: &GpModel, b: &IntervalBox, dim: usize, tol: f64) -> Result<CertifiedInterval> {
    check_tol(tol)?;
    variance_upper_in(m, &SearchDomain::plain(b.clone()), dim, &BnbSettings::with_tol(tol))
}

pub fn variance_upper_in(
    m: &GpModel,
    domain: &SearchDomain,
    dim: usize,
    settings: &BnbSettings,
) -> Result<CertifiedInterval> {
    domain.validate(m)?;
    check_output(m, dim)?;
    let out = m.output(dim);
    let sf2 = out.hyperparams().signal_variance;
    let data = m.dataset();

    let outcome = maximize(domain.state.clone(), settings, |s| {
        if !domain.admits(s) {
            return None;
        }
        let bx = domain.input_box(s);
        // Q(k) = k^T K^-1 k is convex, so Q(k) >= -Q(k0) + g.k with g = 2 K^-1 k0.
        let k0 = out.kernel_column(data, &bx.midpoint());
        let u = out.whiten(&k0);
        let q0 = u.norm_squared();
        let g: DVector<f64> = 2.0
            * out
                .cholesky_factor()
                .tr_solve_lower_triangular(&u)
                .expect("positive diagonal");
        let relax = relaxed_min(m, dim, g.as_slice(), &bx);
        let q_lower = (relax.value - q0 - 64.0 * f64::EPSILON * q0).max(0.0);
        let upper = (sf2 - q_lower).min(variance_upper_in_frame(m, dim, &domain.frame(s, &bx), DEFAULT_ORDER));

        let mut best: Option<(Vec<f64>, f64)> = None;
        for c in domain.candidates(s, &relax.argmin) {
            let v = m.variance_dim(dim, &domain.input_point(&c)).unwrap_or(0.0);
            if best.as_ref().is_none_or(|b| v > b.1) {
                best = Some((c, v));
            }
        }
        let (candidate, candidate_value) = best?;
        Some(NodeBound {
            upper,
            candidate,
            candidate_value,
        })
    })
    .expect("root box admitted");
    Ok(CertifiedInterval::from_max(&outcome))
}

/// Certified `sup_x sum_i |g_i - mean_i(x)|` over the domain.
pub fn sup_abs_deviation(m: &GpModel, domain: &SearchDomain, g: &[f64], settings: &BnbSettings) -> Result<CertifiedInterval> {
    domain.validate(m)?;
    check_dim(m.output_dim(), g.len())?;
    let weights: Vec<(Vec<f64>, Vec<f64>)> = (0..m.output_dim())
        .map(|i| {
            let a: Vec<f64> = m.output(i).weights().iter().copied().collect();
            let n: Vec<f64> = a.iter().map(|v| -v).collect();
            (a, n)
        })
        .collect();

    let outcome = maximize(domain.state.clone(), settings, |s| {
        if !domain.admits(s) {
            return None;
        }
        let bx = domain.input_box(s);
        let frame = domain.frame(s, &bx);
        let lins: Vec<MeanLinearization> = (0..m.output_dim())
            .map(|i| mean_linearization(m, i, &frame, DEFAULT_ORDER))
            .collect();
        let mut upper = 0.0;
        let mut hint = None;
        for (i, (pos, neg)) in weights.iter().enumerate() {
            let lo = relaxed_min(m, i, pos, &bx);
            let hi = relaxed_min(m, i, neg, &bx);
            let (t_lo, t_hi) = lins[i].enclosure();
            let below = (g[i] - lo.value).min(g[i] - t_lo);
            let above = (-hi.value - g[i]).min(t_hi - g[i]);
            upper += below.max(above);
            if hint.is_none() {
                hint = Some(if below >= above { lo.argmin } else { hi.argmin });
            }
        }
        let upper = upper.min(linearized_deviation(domain, s, &bx, &frame, &lins, g));
        let hint = hint.unwrap_or_else(|| bx.midpoint());
        let mut best: Option<(Vec<f64>, f64)> = None;
        for c in domain.candidates(s, &hint) {
            let p = domain.input_point(&c);
            let v: f64 = (0..m.output_dim()).map(|i| (g[i] - m.mean_dim(i, &p)).abs()).sum();
            if best.as_ref().is_none_or(|b| v > b.1) {
                best = Some((c, v));
            }
        }
        let (candidate, candidate_value) = best?;
        Some(NodeBound {
            upper,
            candidate,
            candidate_value,
        })
    })
    .expect("root box admitted");
    Ok(CertifiedInterval::from_max(&outcome))
}

/// `max v.x` over `lo <= x <= hi`, with the first `centre.len()` coordinates
/// also in the L1 ball when one is given.
///
/// Moving any coordinate away from the ball's nearest box point costs one
/// unit of radius per unit of travel, so the optimum spends the remaining
/// radius on the coordinates with the largest `|v_d|` first.
fn max_linear_in_box_ball(v: &[f64], lo: &[f64], hi: &[f64], ball: Option<(&[f64], f64)>) -> f64 {
    let nb = ball.map_or(0, |(c, _)| c.len());
    let mut x: Vec<f64> = (0..v.len())
        .map(|d| match ball {
            Some((c, _)) if d < nb => c[d].clamp(lo[d], hi[d]),
            _ => if v[d] >= 0.0 { hi[d] } else { lo[d] },
        })
        .collect();
    if let Some((c, r)) = ball {
        let used: f64 = (0..nb).map(|d| (x[d] - c[d]).abs()).sum();
        let mut budget = (r - used).max(0.0);
        let mut order: Vec<usize> = (0..nb).filter(|&d| v[d] != 0.0).collect();
        order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
        for d in order {
            if budget <= 0.0 {
                break;
            }
            let room = if v[d] > 0.0 { hi[d] - x[d] } else { x[d] - lo[d] };
            let step = room.min(budget);
            x[d] += step * v[d].signum();
            budget -= step;
        }
    }
    v.iter().zip(&x).map(|(a, b)| a * b).sum()
}

/// Upper bound on `sum_i |g_i - mean_i|` over the node from first-order
/// Taylor models: the sum of absolute values of affine functions is convex,
/// so each sign pattern reduces to a linear program over box and ball.
fn linearized_deviation(
    domain: &SearchDomain,
    s: &IntervalBox,
    bx: &IntervalBox,
    frame: &Frame,
    lins: &[MeanLinearization],
    g: &[f64],
) -> f64 {
    let radius: f64 = lins.iter().map(|l| l.radius).sum();
    if !radius.is_finite() {
        return f64::INFINITY;
    }
    let mapped = frame.axis.iter().any(Option::is_none);
    let (lo, hi, centre, grads): (&[f64], &[f64], Vec<f64>, Vec<Vec<f64>>) = if mapped {
        (s.lower(), s.upper(), s.midpoint(), lins.iter().map(|l| l.gradient.clone()).collect())
    } else {
        let spread = |l: &MeanLinearization| {
            let mut full = vec![0.0; bx.dim()];
            for (axis, g) in frame.axis.iter().zip(&l.gradient) {
                full[axis.expect("axis frame")] = *g;
            }
            full
        };
        (bx.lower(), bx.upper(), frame.centre.clone(), lins.iter().map(spread).collect())
    };
    let ball = domain.l1_ball.as_ref().map(|(c, r)| (c.as_slice(), *r));
    let mut best = f64::NEG_INFINITY;
    for signs in 0u32..(1 << lins.len()) {
        let sigma = |i: usize| if signs >> i & 1 == 1 { -1.0 } else { 1.0 };
        let mut v = vec![0.0; lo.len()];
        let mut constant = 0.0;
        for (i, (l, grad)) in lins.iter().zip(&grads).enumerate() {
            constant += sigma(i) * (g[i] - l.value);
            for (vd, gd) in v.iter_mut().zip(grad) {
                *vd -= sigma(i) * gd;
            }
        }
        constant -= v.iter().zip(&centre).map(|(a, b)| a * b).sum::<f64>();
        best = best.max(constant + max_linear_in_box_ball(&v, lo, hi, ball));
    }
    let scale: f64 = g.iter().map(|v| v.abs()).sum::<f64>() + best.abs();
    best + radius + 64.0 * f64::EPSILON * scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn box_ball_program_matches_vertex_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let v: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lo: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..0.0)).collect();
            let hi: Vec<f64> = lo.iter().map(|l| l + rng.random_range(0.1..1.5)).collect();
            let c = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            let r = rng.random_range(0.05..1.5);
            // Dense grid over the feasible set.
            let n = 40;
            let mut oracle = f64::NEG_INFINITY;
            for i in 0..=n {
                for j in 0..=n {
                    for k in [0, n] {
                        let x: Vec<f64> = [i, j, k]
                            .iter()
                            .enumerate()
                            .map(|(d, &t)| lo[d] + (hi[d] - lo[d]) * t as f64 / n as f64)
                            .collect();
                        if (x[0] - c[0]).abs() + (x[1] - c[1]).abs() <= r {
                            oracle = oracle.max(v.iter().zip(&x).map(|(a, b)| a * b).sum());
                        }
                    }
                }
            }
            let got = max_linear_in_box_ball(&v, &lo, &hi, Some((&c, r)));
            if oracle.is_finite() {
                assert!(got >= oracle - 1e-12, "{got} < {oracle}");
                assert!(got - oracle <= 0.15 * v.iter().map(|a| a.abs()).sum::<f64>(), "{got} vs {oracle}");
            }
        }
    }
    use crate::gp::{Dataset, Hyperparams};

    fn constant_model(c: f64) -> GpModel {
        let xs: Vec<Vec<f64>> = (0..9).map(|k| vec![-1.0 + 0.25 * k as f64]).collect();
        let ys = vec![vec![c]; 9];
        let h = Hyperparams::isotropic(4.0, 1.0, 0.0, 1).unwrap();
        GpModel::new(Dataset::new(xs, ys).unwrap(), vec![h]).unwrap()
    }

    #[test]
    fn constant_targets_give_constant_extrema() {
        let m = constant_model(1.5);
        let b = IntervalBox::new(vec![-0.5], vec![0.5]).unwrap();
        let e = mean_extrema(&m, &b, 0, 1e-4).unwrap();
        assert!((e.min.lo - 1.5).abs() < 1e-3 && (e.max.hi - 1.5).abs() < 1e-3);
        assert!(e.min.gap <= 1e-4 && e.max.gap <= 1e-4);
    }

    #[test]
    fn far_box_reverts_to_prior() {
        let m = constant_model(1.5);
        let b = IntervalBox::new(vec![40.0], vec![41.0]).unwrap();
        let e = mean_extrema(&m, &b, 0, 1e-6).unwrap();
        assert!(e.min.contains(0.0) || e.min.lo <= 0.0 && e.min.hi >= -1e-12);
        assert!(e.max.lo <= 1e-12 && e.max.hi >= 0.0);
        let v = variance_upper(&m, &b, 0, 1e-6).unwrap();
        assert!((v.hi - 4.0).abs() < 1e-6);
    }

    #[test]
    fn training_point_variance_is_zero() {
        let m = constant_model(0.2);
        let b = IntervalBox::point(&[0.25]).unwrap();
        let v = variance_upper(&m, &b, 0, 1e-9).unwrap();
        assert!(v.hi < 1e-6, "{v:?}");
    }

    #[test]
    fn rejects_bad_arguments() {
        let m = constant_model(0.2);
        let b = IntervalBox::new(vec![0.0], vec![1.0]).unwrap();
        assert!(mean_extrema(&m, &b, 0, 0.0).is_err());
        assert!(mean_extrema(&m, &b, 1, 1e-3).is_err());
        let b2 = IntervalBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!(variance_upper(&m, &b2, 0, 1e-3).is_err());
    }

    #[test]
    fn l1_ball_restricts_deviation() {
        // mean_i(x) ~ x_i near the origin: the L1 ball halves the box supremum.
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for a in -4..=4 {
            for b in -4..=4 {
                let x = vec![0.25 * a as f64, 0.25 * b as f64];
                ys.push(x.clone());
                xs.push(x);
            }
        }
        let h = Hyperparams::isotropic(4.0, 2.0, 1e-6, 2).unwrap();
        let m = GpModel::new(Dataset::new(xs, ys).unwrap(), vec![h.clone(), h]).unwrap();
        let state = IntervalBox::around(&[0.0, 0.0], 0.2).unwrap();
        let settings = BnbSettings::with_tol(1e-5);
        let boxed = sup_abs_deviation(&m, &SearchDomain::plain(state.clone()), &[0.0, 0.0], &settings).unwrap();
        let ball = SearchDomain {
            state,
            control: DomainControl::None,
            l1_ball: Some((vec![0.0, 0.0], 0.2)),
        };
        let balled = sup_abs_deviation(&m, &ball, &[0.0, 0.0], &settings).unwrap();
        assert!((boxed.hi - 0.4).abs() < 5e-3, "{boxed:?}");
        assert!((balled.hi - 0.2).abs() < 5e-3, "{balled:?}");
    }
}

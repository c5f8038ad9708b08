//! Certified probability tubes around a deterministic predictor.
//!
//! At every step the tube is an L1 ball of radius `K_t` around the predictor
//! `x_hat_t`, and `p_t` bounds the probability that a GP trajectory has left
//! it. Each step chooses the smallest grid radius with `p_t < epsilon`.

mod dudley;
mod export;

pub use dudley::{dudley_integral, dudley_integral_with, dudley_upper_sum, MAX_PANELS};
pub use export::write_schedule_csv;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::bounds::{
    canonical_metric_diameter_with, metric_lipschitz, sup_abs_deviation, variance_upper_in, BnbSettings,
    CertifiedInterval, DomainControl, IntervalBox, SearchDomain,
};
use crate::control::Controls;
use crate::error::{check_dim, Error, Result};
use crate::gp::GpModel;
use crate::moments::{mm_rollout, GaussianBelief, MmOptions};

/// Factor in front of the entropy integral in the tail exponent.
const DUDLEY_FACTOR: f64 = 12.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Predictor {
    #[default]
    PosteriorMean,
    MomentMatching,
}

/// `count` geometrically spaced radii from `lo` to `hi`.
pub fn geometric_grid(lo: f64, hi: f64, count: usize) -> Result<Vec<f64>> {
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || count == 0 {
        return Err(Error::InvalidArgument(format!("bad grid [{lo}, {hi}] x {count}")));
    }
    if count == 1 {
        return Ok(vec![lo]);
    }
    let ratio = (hi / lo).ln() / (count - 1) as f64;
    let mut g: Vec<f64> = (0..count).map(|k| lo * (ratio * k as f64).exp()).collect();
    g[count - 1] = hi;
    Ok(g)
}

pub fn default_grid() -> Vec<f64> {
    geometric_grid(1e-3, 10.0, 60).expect("valid constants")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TubeConfig {
    pub epsilon: f64,
    /// Candidate radii, ascending.
    pub grid: Vec<f64>,
    /// Covering constant `N` in the entropy integral; defaults to the region dimension.
    pub dudley_n: Option<f64>,
    pub mean_bnb: BnbSettings,
    pub variance_bnb: BnbSettings,
    /// Known bounds of the state space; regions are clipped to it.
    pub state_space: Option<IntervalBox>,
    /// Fixed `K_0` instead of choosing it from the grid.
    pub initial_radius: Option<f64>,
    pub predictor: Predictor,
}

impl Default for TubeConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            grid: default_grid(),
            dudley_n: None,
            mean_bnb: BnbSettings {
                tol: 1e-7,
                rel_tol: 1e-4,
                ..BnbSettings::default()
            },
            variance_bnb: BnbSettings {
                tol: 1e-12,
                rel_tol: 5e-2,
                ..BnbSettings::default()
            },
            state_space: None,
            initial_radius: None,
            predictor: Predictor::PosteriorMean,
        }
    }
}

impl TubeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::InvalidArgument(format!("epsilon {} outside (0, 1]", self.epsilon)));
        }
        if self.grid.is_empty() || self.grid.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
            return Err(Error::InvalidArgument("grid radii must be positive and finite".into()));
        }
        if self.grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("grid must be strictly ascending".into()));
        }
        if let Some(n) = self.dudley_n {
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::InvalidArgument(format!("dudley_n must be positive, got {n}")));
            }
        }
        if let Some(k) = self.initial_radius {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::InvalidArgument(format!("initial radius must be positive, got {k}")));
            }
        }
        Ok(())
    }

    fn accepts(&self, p: f64) -> bool {
        p < self.epsilon || self.epsilon >= 1.0
    }
}

/// Standard normal upper tail `P(Z > x)`.
fn upper_tail(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Upper bound on `P(|x_0 - center|_1 > k0)` for `x_0 ~ N(mu0, sigma0)`.
///
/// Uses the Gaussian mass of the box with half-side `k0 / n`, which lies inside
/// the L1 ball. Only diagonal covariances are accepted.
pub fn initial_error_probability(mu0: &[f64], sigma0: &DMatrix<f64>, center: &[f64], k0: f64) -> Result<f64> {
    let n = mu0.len();
    check_dim(n, center.len())?;
    check_dim(n, sigma0.nrows())?;
    check_dim(n, sigma0.ncols())?;
    if !(k0 > 0.0) {
        return Err(Error::InvalidArgument(format!("K0 must be positive, got {k0}")));
    }
    for i in 0..n {
        for j in 0..n {
            if i != j && sigma0[(i, j)] != 0.0 {
                return Err(Error::InvalidArgument("initial covariance must be diagonal".into()));
            }
        }
        if !(sigma0[(i, i)] >= 0.0) {
            return Err(Error::InvalidArgument("initial variances must be non-negative".into()));
        }
    }
    if k0.is_infinite() {
        return Ok(0.0);
    }
    let half = k0 / n as f64;
    let mut log_mass = 0.0;
    for i in 0..n {
        let lo = center[i] - half - mu0[i];
        let hi = center[i] + half - mu0[i];
        let sd = sigma0[(i, i)].sqrt();
        let outside = if sd == 0.0 {
            if lo <= 0.0 && 0.0 <= hi {
                0.0
            } else {
                1.0
            }
        } else {
            upper_tail(hi / sd) + upper_tail(-lo / sd)
        };
        if outside >= 1.0 {
            return Ok(1.0);
        }
        log_mass += (-outside).ln_1p();
    }
    Ok((-log_mass.exp_m1()).clamp(0.0, 1.0))
}

/// `p' = q (1 - p) + p`.
pub fn propagate_probability(p: f64, q: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&q));
    (q * (1.0 - p) + p).clamp(0.0, 1.0)
}

/// Quantities of one region that do not depend on the next radius.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionStats {
    /// `sup_x |g - mean(x)|_1` over the region.
    pub sup_deviation: CertifiedInterval,
    /// Certified upper bounds on the posterior variance per output.
    pub xi: Vec<f64>,
    pub lambda: Vec<f64>,
    pub lipschitz: Vec<f64>,
    /// Largest side of the GP input box.
    pub side: f64,
    /// Number of input dimensions with positive width.
    pub region_dims: usize,
    /// Entropy integral per output (without the leading factor).
    pub dudley: Vec<f64>,
    pub budget_exceeded: bool,
}

/// Tail bound for one candidate radius.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailEval {
    pub q: f64,
    pub eta: Vec<f64>,
    /// Some `eta_i <= 0`: the bound is the trivial 1.
    pub vacuous: bool,
}

impl RegionStats {
    pub fn compute(m: &GpModel, domain: &SearchDomain, g: &[f64], cfg: &TubeConfig) -> Result<Self> {
        let sup_deviation = sup_abs_deviation(m, domain, g, &cfg.mean_bnb)?;
        let input_box = domain.full_input_box();
        let side = input_box.max_width();
        let region_dims = input_box.effective_dim();
        let cover_n = cfg.dudley_n.unwrap_or(region_dims as f64);
        let per_dim: Vec<(f64, bool, f64, f64, f64)> = (0..m.output_dim())
            .into_par_iter()
            .map(|i| {
                let xi = variance_upper_in(m, domain, i, &cfg.variance_bnb)?;
                let lambda = canonical_metric_diameter_with(m, &input_box, i, xi.hi)?;
                let lip = metric_lipschitz(m, &input_box, i)?;
                let integral = dudley_integral_with(lip, side, region_dims, lambda, cover_n);
                Ok((xi.hi, xi.budget_exceeded, lambda, lip, integral))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            budget_exceeded: sup_deviation.budget_exceeded || per_dim.iter().any(|v| v.1),
            sup_deviation,
            xi: per_dim.iter().map(|v| v.0).collect(),
            lambda: per_dim.iter().map(|v| v.2).collect(),
            lipschitz: per_dim.iter().map(|v| v.3).collect(),
            side,
            region_dims,
            dudley: per_dim.iter().map(|v| v.4).collect(),
        })
    }

    /// `min(1, 2 sum_i exp(-eta_i^2 / (2 xi_i)))` with
    /// `eta_i = (k_next - sup|g - mean|_1) / n - 12 I_i`.
    pub fn tail(&self, k_next: f64) -> TailEval {
        let n = self.xi.len() as f64;
        let eta: Vec<f64> = self
            .dudley
            .iter()
            .map(|int| (k_next - self.sup_deviation.hi) / n - DUDLEY_FACTOR * int)
            .collect();
        if eta.iter().any(|e| !(*e > 0.0)) {
            return TailEval { q: 1.0, eta, vacuous: true };
        }
        let s: f64 = eta
            .iter()
            .zip(&self.xi)
            .map(|(e, xi)| if *xi > 0.0 { (-e * e / (2.0 * xi)).exp() } else { 0.0 })
            .sum();
        TailEval {
            q: (2.0 * s).min(1.0),
            eta,
            vacuous: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub q: f64,
    pub vacuous: bool,
    pub eta: Vec<f64>,
    pub xi: Vec<f64>,
    pub lambda: Vec<f64>,
    pub lipschitz: Vec<f64>,
    pub dudley: Vec<f64>,
    pub sup_abs_deviation: f64,
    pub side: f64,
    pub region_dims: usize,
    pub budget_exceeded: bool,
}

impl StepDiagnostics {
    fn new(stats: &RegionStats, tail: TailEval) -> Self {
        Self {
            q: tail.q,
            vacuous: tail.vacuous,
            eta: tail.eta,
            xi: stats.xi.clone(),
            lambda: stats.lambda.clone(),
            lipschitz: stats.lipschitz.clone(),
            dudley: stats.dudley.clone(),
            sup_abs_deviation: stats.sup_deviation.hi,
            side: stats.side,
            region_dims: stats.region_dims,
            budget_exceeded: stats.budget_exceeded,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepCertificate {
    pub t: usize,
    pub k: f64,
    /// Bound on `P(|x_t - center|_1 > k)`.
    pub p: f64,
    pub center: Vec<f64>,
    /// Box enclosing the tube section, clipped to the state space.
    pub region: IntervalBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<StepDiagnostics>,
}

impl StepCertificate {
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.center).map(|(a, b)| (a - b).abs()).sum::<f64>() <= self.k
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundSchedule {
    pub epsilon: f64,
    pub horizon: usize,
    pub steps: Vec<StepCertificate>,
}

impl BoundSchedule {
    pub fn radii(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.k).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfeasibleStep {
    pub t: usize,
    pub best_k: f64,
    pub best_p: f64,
}

/// A schedule, possibly cut short at the first step no radius could certify.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TubeOutcome {
    pub schedule: BoundSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infeasible: Option<InfeasibleStep>,
}

impl TubeOutcome {
    pub fn is_feasible(&self) -> bool {
        self.infeasible.is_none()
    }
}

fn region_box(center: &[f64], k: f64, cfg: &TubeConfig) -> Result<IntervalBox> {
    let b = IntervalBox::around(center, k)?;
    match &cfg.state_space {
        None => Ok(b),
        Some(x) => {
            check_dim(x.dim(), b.dim())?;
            b.intersect(x)
                .ok_or_else(|| Error::InvalidArgument("tube section lies outside the state space".into()))
        }
    }
}

/// Tube section at `t = 0`, with `K_0` fixed or the smallest grid radius meeting epsilon.
pub fn initial_certificate(init: &GaussianBelief, cfg: &TubeConfig) -> Result<StepCertificate> {
    cfg.validate()?;
    let center = init.mean.clone();
    let prob = |k: f64| initial_error_probability(&init.mean, &init.covariance, &center, k);
    let (k, p) = match cfg.initial_radius {
        Some(k) => {
            let p = prob(k)?;
            if !cfg.accepts(p) {
                return Err(Error::Infeasible { step: 0, k, p });
            }
            (k, p)
        }
        None => {
            let idx = first_accepted(&cfg.grid, |k| Ok(cfg.accepts(prob(k)?)))?;
            match idx {
                Some(i) => (cfg.grid[i], prob(cfg.grid[i])?),
                None => {
                    let k = *cfg.grid.last().expect("non-empty grid");
                    return Err(Error::Infeasible { step: 0, k, p: prob(k)? });
                }
            }
        }
    };
    Ok(StepCertificate {
        t: 0,
        k,
        p,
        region: region_box(&center, k, cfg)?,
        center,
        diagnostics: None,
    })
}

/// Index of the first grid entry satisfying a monotone predicate.
fn first_accepted(grid: &[f64], mut ok: impl FnMut(f64) -> Result<bool>) -> Result<Option<usize>> {
    let (mut lo, mut hi) = (0, grid.len());
    while lo < hi {
        let mid = (lo + hi) / 2;
        if ok(grid[mid])? {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok((lo < grid.len()).then_some(lo))
}

/// Search region for the step leaving `prev`.
pub fn step_domain<'a>(prev: &StepCertificate, controls: &'a Controls) -> Result<SearchDomain<'a>> {
    let control = match controls {
        Controls::None => DomainControl::None,
        Controls::OpenLoop { .. } => DomainControl::Fixed(controls.at(prev.t, &prev.center)?),
        Controls::Feedback { policy } => DomainControl::Policy(policy),
    };
    Ok(SearchDomain {
        state: prev.region.clone(),
        control,
        l1_ball: Some((prev.center.clone(), prev.k)),
    })
}

/// Bound on `P(sup_{x in region} |g - f(x, u)|_1 > k_next)`.
pub fn sup_tail_probability(
    m: &GpModel,
    prev: &StepCertificate,
    controls: &Controls,
    g: &[f64],
    k_next: f64,
    cfg: &TubeConfig,
) -> Result<TailEval> {
    let stats = RegionStats::compute(m, &step_domain(prev, controls)?, g, cfg)?;
    Ok(stats.tail(k_next))
}

fn certificate(prev: &StepCertificate, stats: &RegionStats, g: &[f64], k: f64, cfg: &TubeConfig) -> Result<StepCertificate> {
    let tail = stats.tail(k);
    Ok(StepCertificate {
        t: prev.t + 1,
        k,
        p: propagate_probability(prev.p, tail.q),
        center: g.to_vec(),
        region: region_box(g, k, cfg)?,
        diagnostics: Some(StepDiagnostics::new(stats, tail)),
    })
}

/// Next certificate for a given radius.
pub fn propagate_step(
    m: &GpModel,
    prev: &StepCertificate,
    controls: &Controls,
    g: &[f64],
    k_next: f64,
    cfg: &TubeConfig,
) -> Result<StepCertificate> {
    let stats = RegionStats::compute(m, &step_domain(prev, controls)?, g, cfg)?;
    certificate(prev, &stats, g, k_next, cfg)
}

/// Smallest grid radius whose propagated probability is below epsilon.
pub fn select_k_with_stats(prev: &StepCertificate, stats: &RegionStats, g: &[f64], cfg: &TubeConfig) -> Result<StepCertificate> {
    let ok = |k: f64| cfg.accepts(propagate_probability(prev.p, stats.tail(k).q));
    match first_accepted(&cfg.grid, |k| Ok(ok(k)))? {
        Some(i) => certificate(prev, stats, g, cfg.grid[i], cfg),
        None => {
            let k = *cfg.grid.last().expect("non-empty grid");
            Err(Error::Infeasible {
                step: prev.t + 1,
                k,
                p: propagate_probability(prev.p, stats.tail(k).q),
            })
        }
    }
}

pub fn select_k(
    m: &GpModel,
    prev: &StepCertificate,
    controls: &Controls,
    g: &[f64],
    cfg: &TubeConfig,
) -> Result<StepCertificate> {
    cfg.validate()?;
    let stats = RegionStats::compute(m, &step_domain(prev, controls)?, g, cfg)?;
    select_k_with_stats(prev, &stats, g, cfg)
}

/// Builds the tube for `t = 0..=horizon`.
pub fn bound_trajectory(
    m: &GpModel,
    init: &GaussianBelief,
    controls: &Controls,
    horizon: usize,
    cfg: &TubeConfig,
) -> Result<TubeOutcome> {
    cfg.validate()?;
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    check_dim(m.output_dim(), init.dim())?;
    check_dim(m.input_dim(), init.dim() + controls.control_dim())?;
    controls.validate(init.dim(), horizon)?;

    let mm_means = match cfg.predictor {
        Predictor::PosteriorMean => None,
        Predictor::MomentMatching => Some(
            mm_rollout(m, init, controls, horizon, &MmOptions::default())?
                .into_iter()
                .map(|b| b.mean)
                .collect::<Vec<_>>(),
        ),
    };

    let mut schedule = BoundSchedule {
        epsilon: cfg.epsilon,
        horizon,
        steps: Vec::with_capacity(horizon + 1),
    };
    let first = match initial_certificate(init, cfg) {
        Ok(c) => c,
        Err(Error::Infeasible { step, k, p }) => {
            return Ok(TubeOutcome {
                schedule,
                infeasible: Some(InfeasibleStep { t: step, best_k: k, best_p: p }),
            })
        }
        Err(e) => return Err(e),
    };
    schedule.steps.push(first);

    for t in 0..horizon {
        let prev = schedule.steps.last().expect("non-empty");
        let g = match &mm_means {
            Some(means) => means[t + 1].clone(),
            None => {
                let mut x = prev.center.clone();
                x.extend(controls.at(t, &prev.center)?);
                m.posterior_mean(&x)?
            }
        };
        let stats = RegionStats::compute(m, &step_domain(prev, controls)?, &g, cfg)?;
        if stats.budget_exceeded {
            log::warn!("step {}: branch and bound hit its node budget; bounds are looser", t + 1);
        }
        match select_k_with_stats(prev, &stats, &g, cfg) {
            Ok(c) => {
                log::debug!("step {}: K = {:e}, p = {:e}", c.t, c.k, c.p);
                schedule.steps.push(c);
            }
            Err(Error::Infeasible { step, k, p }) => {
                return Ok(TubeOutcome {
                    schedule,
                    infeasible: Some(InfeasibleStep { t: step, best_k: k, best_p: p }),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TubeOutcome {
        schedule,
        infeasible: None,
    })
}

//! Exact moment matching of SE-kernel GPs under Gaussian inputs.
//!
//! For a Gaussian input `x ~ N(m, S)` the mean and covariance of the GP output
//! have closed forms (Gaussian integrals of products of SE kernels). They are
//! the baseline the certified tubes are compared against.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::control::{Controls, PolicyKind};
use crate::error::{check_dim, Error, Result};
use crate::gp::GpModel;

/// Eigenvalues below this (relative to the largest) are clipped without comment.
const CLIP_LOG_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        check_dim(n, covariance.nrows())?;
        check_dim(n, covariance.ncols())?;
        if !mean.iter().chain(covariance.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("belief"));
        }
        let scale = covariance.amax().max(1.0);
        for i in 0..n {
            for j in 0..i {
                if (covariance[(i, j)] - covariance[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidArgument("belief covariance is not symmetric".into()));
                }
            }
        }
        let eig = covariance.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|e| *e < -1e-10 * scale) {
            return Err(Error::InvalidArgument("belief covariance is not positive semidefinite".into()));
        }
        Ok(Self { mean, covariance })
    }

    pub fn diagonal(mean: Vec<f64>, variances: &[f64]) -> Result<Self> {
        check_dim(mean.len(), variances.len())?;
        if variances.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("variances must be non-negative".into()));
        }
        Self::new(mean, DMatrix::from_diagonal(&DVector::from_column_slice(variances)))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std_devs(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.covariance[(i, i)].max(0.0).sqrt()).collect()
    }

    pub fn is_diagonal(&self) -> bool {
        let n = self.dim();
        (0..n).all(|i| (0..n).all(|j| i == j || self.covariance[(i, j)] == 0.0))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MmOptions {
    /// Keep covariances between output dimensions. When off, only the
    /// diagonal is propagated.
    pub cross_covariance: bool,
}

impl Default for MmOptions {
    fn default() -> Self {
        Self { cross_covariance: true }
    }
}

/// Moments of `f(x)` for a Gaussian GP input `x`.
#[derive(Debug, Clone)]
pub struct MmMoments {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
    /// `Cov[x, f(x)]`, input dim by output dim.
    pub input_output: DMatrix<f64>,
    /// Magnitude of the most negative eigenvalue removed to restore PSD.
    pub clip: f64,
}

struct Prepared {
    /// `L^-1` per output, where `L L^T = K + sn2 I`.
    inverse_factors: Vec<DMatrix<f64>>,
}

impl Prepared {
    fn new(m: &GpModel) -> Self {
        let inverse_factors = m
            .outputs()
            .iter()
            .map(|o| {
                let l = o.cholesky_factor();
                let n = l.nrows();
                l.solve_lower_triangular(&DMatrix::identity(n, n))
                    .expect("positive diagonal")
            })
            .collect();
        Self { inverse_factors }
    }
}

/// Exact output moments for a GP input distributed as `N(mean, cov)`.
pub fn mm_moments(m: &GpModel, mean: &[f64], cov: &DMatrix<f64>) -> Result<MmMoments> {
    mm_moments_prepared(m, &Prepared::new(m), mean, cov)
}

fn mm_moments_prepared(m: &GpModel, prep: &Prepared, mean: &[f64], s: &DMatrix<f64>) -> Result<MmMoments> {
    let d = m.input_dim();
    check_dim(d, mean.len())?;
    check_dim(d, s.nrows())?;
    check_dim(d, s.ncols())?;
    let data = m.dataset();
    let mm = data.len();
    let e = m.output_dim();
    let eye = DMatrix::<f64>::identity(d, d);
    let mu = DVector::from_column_slice(mean);
    let nu: Vec<DVector<f64>> = data.inputs().map(|x| DVector::from_column_slice(x) - &mu).collect();

    let mut out_mean = vec![0.0; e];
    let mut input_output = DMatrix::zeros(d, e);
    // Per output: q_j = E[k(x, x_j)], the log ratio k(m, x_j) / q_j, and
    // Lambda^-1 nu_j, all reused by the covariance.
    let mut q_all: Vec<DVector<f64>> = Vec::with_capacity(e);
    let mut log_ratio: Vec<Vec<f64>> = Vec::with_capacity(e);
    let mut scaled_nu: Vec<Vec<DVector<f64>>> = Vec::with_capacity(e);
    let mut inv_lambda = Vec::with_capacity(e);

    for a in 0..e {
        let out = m.output(a);
        let h = out.hyperparams();
        let il = DVector::from_iterator(d, h.lengthscales.iter().map(|l| 1.0 / (l * l)));
        let lambda = DMatrix::from_diagonal(&il.map(|v| 1.0 / v));
        let half_log_det = 0.5 * log_det_identity_plus(s, &il).ok_or(Error::NotPositiveDefinite { dim: a })?;
        let lu = (s + &lambda).lu();
        let beta = out.weights();
        let mut weighted = DVector::zeros(d);
        let scale = h.signal_variance * (-half_log_det).exp();
        let mut q = DVector::zeros(mm);
        let mut ratio = Vec::with_capacity(mm);
        let mut snu = Vec::with_capacity(mm);
        for (j, v) in nu.iter().enumerate() {
            let w = lu.solve(v).ok_or(Error::NotPositiveDefinite { dim: a })?;
            q[j] = scale * (-0.5 * v.dot(&w)).exp();
            out_mean[a] += beta[j] * q[j];
            weighted += &w * (beta[j] * q[j]);
            let sv = v.component_mul(&il);
            // ln k(m, x_j) - ln q_j, written so that it vanishes with S.
            ratio.push(half_log_det - 0.5 * w.dot(&(s * &sv)));
            snu.push(sv);
        }
        // S (S + Lambda)^-1 sum_j beta_j q_j nu_j, with the solve already applied.
        let col = s * weighted;
        input_output.set_column(a, &col);
        q_all.push(q);
        log_ratio.push(ratio);
        scaled_nu.push(snu);
        inv_lambda.push(il);
    }

    let mut cov = DMatrix::zeros(e, e);
    for a in 0..e {
        for b in 0..=a {
            let il_sum = &inv_lambda[a] + &inv_lambda[b];
            let half_log_det = 0.5 * log_det_identity_plus(s, &il_sum).ok_or(Error::NotPositiveDefinite { dim: a })?;
            let r = s * DMatrix::from_diagonal(&il_sum) + &eye;
            let rs = r.lu().solve(s).ok_or(Error::NotPositiveDefinite { dim: a })?;
            // E[k_a(x, x_i) k_b(x, x_j)] = q_a,i q_b,j (1 + expm1(delta_ij)); the
            // expm1 part alone carries the variance of the mean, which avoids
            // cancelling large weighted sums against the squared mean.
            let mut excess = DMatrix::zeros(mm, mm);
            for i in 0..mm {
                for j in 0..mm {
                    let z = &scaled_nu[a][i] + &scaled_nu[b][j];
                    let delta = log_ratio[a][i] + log_ratio[b][j] - half_log_det + 0.5 * z.dot(&(&rs * &z));
                    excess[(i, j)] = q_all[a][i] * q_all[b][j] * delta.exp_m1();
                }
            }
            let ba = m.output(a).weights();
            let bb = m.output(b).weights();
            let mut v = ba.dot(&(&excess * bb));
            if a == b {
                let q = &q_all[a] * q_all[a].transpose() + &excess;
                // tr((K + sn2 I)^-1 Q) as tr(L^-1 Q L^-T).
                let linv = &prep.inverse_factors[a];
                let tr: f64 = (linv * &q).component_mul(linv).sum();
                v += m.output(a).hyperparams().signal_variance - tr;
            }
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }

    let (covariance, clip) = clip_psd(cov);
    if clip > CLIP_LOG_THRESHOLD * covariance.amax().max(f64::MIN_POSITIVE) {
        log::warn!("moment-matched covariance clipped to PSD (magnitude {clip:e})");
    } else if clip > 0.0 {
        log::debug!("moment-matched covariance clipped to PSD (magnitude {clip:e})");
    }
    Ok(MmMoments {
        mean: out_mean,
        covariance,
        input_output,
        clip,
    })
}

/// `ln det(I + S diag(p))` from the eigenvalues of `diag(p)^1/2 S diag(p)^1/2`,
/// accurate for small `S`. `None` if the matrix is not positive definite.
fn log_det_identity_plus(s: &DMatrix<f64>, p: &DVector<f64>) -> Option<f64> {
    let root = p.map(f64::sqrt);
    let sym = DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| root[i] * 0.5 * (s[(i, j)] + s[(j, i)]) * root[j]);
    let mut total = 0.0;
    for l in sym.symmetric_eigenvalues().iter() {
        if !(*l > -1.0) {
            return None;
        }
        total += l.ln_1p();
    }
    Some(total)
}

fn clip_psd(c: DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let sym = (&c + c.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let most_negative = eig.eigenvalues.iter().copied().fold(0.0f64, f64::min);
    if most_negative >= 0.0 {
        return (sym, 0.0);
    }
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    let fixed = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (fixed, -most_negative)
}

/// Joint Gaussian of the GP input `(x, u)` given the state belief.
fn input_distribution(b: &GaussianBelief, controls: &Controls, t: usize) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = b.dim();
    match controls {
        Controls::None => Ok((b.mean.clone(), b.covariance.clone())),
        Controls::OpenLoop { .. } => {
            let u = controls.at(t, &b.mean)?;
            let d = n + u.len();
            let mut mean = b.mean.clone();
            mean.extend_from_slice(&u);
            let mut cov = DMatrix::zeros(d, d);
            cov.view_mut((0, 0), (n, n)).copy_from(&b.covariance);
            Ok((mean, cov))
        }
        Controls::Feedback { policy } => {
            if policy.kind != PolicyKind::Linear {
                return Err(Error::Unsupported(
                    "moment matching through a sine-squashed policy".into(),
                ));
            }
            check_dim(n, policy.state_dim())?;
            let k = policy.control_dim();
            let w = DMatrix::from_fn(k, n, |r, c| policy.gain[r][c]);
            let mut t_map = DMatrix::zeros(n + k, n);
            t_map.view_mut((0, 0), (n, n)).fill_with_identity();
            t_map.view_mut((n, 0), (k, n)).copy_from(&w);
            let mean = &t_map * DVector::from_column_slice(&b.mean);
            let cov = &t_map * &b.covariance * t_map.transpose();
            Ok((mean.iter().copied().collect(), cov))
        }
    }
}

/// One moment-matching step of the closed or open loop.
pub fn mm_step(m: &GpModel, b: &GaussianBelief, controls: &Controls, t: usize) -> Result<GaussianBelief> {
    mm_step_with(m, &Prepared::new(m), b, controls, t, &MmOptions::default())
}

fn mm_step_with(
    m: &GpModel,
    prep: &Prepared,
    b: &GaussianBelief,
    controls: &Controls,
    t: usize,
    options: &MmOptions,
) -> Result<GaussianBelief> {
    check_dim(m.output_dim(), b.dim())?;
    let (mean, cov) = input_distribution(b, controls, t)?;
    let mom = mm_moments_prepared(m, prep, &mean, &cov)?;
    let mut c = mom.covariance;
    if !options.cross_covariance {
        c = DMatrix::from_diagonal(&c.diagonal());
    }
    Ok(GaussianBelief {
        mean: mom.mean,
        covariance: c,
    })
}

/// Beliefs for `t = 0..=horizon`.
pub fn mm_rollout(
    m: &GpModel,
    init: &GaussianBelief,
    controls: &Controls,
    horizon: usize,
    options: &MmOptions,
) -> Result<Vec<GaussianBelief>> {
    controls.validate(init.dim(), horizon)?;
    let prep = Prepared::new(m);
    let mut out = Vec::with_capacity(horizon + 1);
    out.push(init.clone());
    for t in 0..horizon {
        let next = mm_step_with(m, &prep, &out[t], controls, t, options)?;
        out.push(next);
    }
    Ok(out)
}

/// CSV with columns `t, mean_i, var_i, lo_i, hi_i` (band is mean +- k sd).
pub fn write_rollout_csv<W: Write>(w: W, beliefs: &[GaussianBelief], k: f64) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let n = beliefs.first().map_or(0, GaussianBelief::dim);
    let mut header = vec!["t".to_string()];
    for prefix in ["mean", "var", "lo", "hi"] {
        header.extend((1..=n).map(|i| format!("{prefix}_{i}")));
    }
    wr.write_record(&header)?;
    for (t, b) in beliefs.iter().enumerate() {
        let sd = b.std_devs();
        let mut row = vec![t.to_string()];
        row.extend(b.mean.iter().map(|v| format!("{v:e}")));
        row.extend((0..n).map(|i| format!("{:e}", b.covariance[(i, i)])));
        row.extend((0..n).map(|i| format!("{:e}", b.mean[i] - k * sd[i])));
        row.extend((0..n).map(|i| format!("{:e}", b.mean[i] + k * sd[i])));
        wr.write_record(&row)?;
    }
    wr.flush()?;
    Ok(())
}

//! Squared-exponential Gaussian-process regression.
//!
//! Each output dimension is an independent zero-mean GP with ARD
//! lengthscales, conditioned on a shared set of training inputs. The Gram
//! matrix is factorized once at construction; afterwards a [`GpModel`] is
//! immutable and can be shared freely between threads.

mod fit;
mod io;

pub use fit::{fit_hyperparameters, FitOptions, FitReport};
pub use io::{load_dataset_csv, read_dataset_csv, write_dataset_csv, ModelDocument, MODEL_FORMAT_VERSION};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Relative jitter added to the Gram diagonal, in units of the signal variance.
pub const JITTER: f64 = 1e-8;

/// Posterior variances below `-NEGATIVE_VARIANCE_TOL * signal_variance` are
/// treated as a broken factorization rather than rounding noise.
const NEGATIVE_VARIANCE_TOL: f64 = 1e-9;

/// Squared-exponential kernel hyperparameters for one output dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub noise_variance: f64,
}

impl Hyperparams {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>, noise_variance: f64) -> Result<Self> {
        let h = Self {
            signal_variance,
            lengthscales,
            noise_variance,
        };
        h.validate()?;
        Ok(h)
    }

    /// Isotropic hyperparameters over `dim` inputs.
    pub fn isotropic(signal_variance: f64, lengthscale: f64, noise_variance: f64, dim: usize) -> Result<Self> {
        Self::new(signal_variance, vec![lengthscale; dim], noise_variance)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.signal_variance) {
            return Err(Error::InvalidArgument(format!(
                "signal variance must be positive, got {}",
                self.signal_variance
            )));
        }
        if self.lengthscales.is_empty() || !self.lengthscales.iter().all(|&l| positive(l)) {
            return Err(Error::InvalidArgument(
                "lengthscales must be a non-empty vector of positive values".into(),
            ));
        }
        if !(self.noise_variance.is_finite() && self.noise_variance >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise variance must be non-negative, got {}",
                self.noise_variance
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn signal_std(&self) -> f64 {
        self.signal_variance.sqrt()
    }

    pub fn min_lengthscale(&self) -> f64 {
        self.lengthscales.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Kernel value as a function of the scaled squared distance.
    #[inline]
    pub fn profile(&self, scaled_sq_dist: f64) -> f64 {
        self.signal_variance * (-0.5 * scaled_sq_dist).exp()
    }

    /// `sum_d (a_d - b_d)^2 / l_d^2`, without dimension checks.
    #[inline]
    pub fn scaled_sq_dist(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| {
                let r = (x - y) / l;
                r * r
            })
            .sum()
    }

    #[inline]
    pub(crate) fn k(&self, a: &[f64], b: &[f64]) -> f64 {
        self.profile(self.scaled_sq_dist(a, b))
    }
}

/// `sigma_f^2 exp(-1/2 sum_d (x1_d - x2_d)^2 / l_d^2)`.
pub fn kernel_eval(h: &Hyperparams, x1: &[f64], x2: &[f64]) -> Result<f64> {
    check_dim(h.input_dim(), x1.len())?;
    check_dim(h.input_dim(), x2.len())?;
    Ok(h.k(x1, x2))
}

/// Transition data: inputs are state ⊕ control, targets are next states.
///
/// Stored row-major so that each input point is a contiguous slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    input_dim: usize,
    output_dim: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::InvalidArgument("dataset must contain at least one point".into()));
        }
        check_dim(inputs.len(), targets.len())?;
        let input_dim = inputs[0].len();
        let output_dim = targets[0].len();
        if input_dim == 0 || output_dim == 0 {
            return Err(Error::InvalidArgument("dataset rows must be non-empty".into()));
        }
        let mut flat_in = Vec::with_capacity(inputs.len() * input_dim);
        let mut flat_out = Vec::with_capacity(targets.len() * output_dim);
        for (x, y) in inputs.iter().zip(&targets) {
            check_dim(input_dim, x.len())?;
            check_dim(output_dim, y.len())?;
            flat_in.extend_from_slice(x);
            flat_out.extend_from_slice(y);
        }
        Self::from_flat(input_dim, output_dim, flat_in, flat_out)
    }

    pub fn from_flat(input_dim: usize, output_dim: usize, inputs: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || inputs.is_empty() {
            return Err(Error::InvalidArgument("dataset must be non-empty".into()));
        }
        if inputs.len() % input_dim != 0 || targets.len() % output_dim != 0 {
            return Err(Error::InvalidArgument("ragged dataset arrays".into()));
        }
        check_dim(inputs.len() / input_dim, targets.len() / output_dim)?;
        if !inputs.iter().chain(&targets).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("dataset"));
        }
        Ok(Self {
            input_dim,
            output_dim,
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn input(&self, j: usize) -> &[f64] {
        &self.inputs[j * self.input_dim..(j + 1) * self.input_dim]
    }

    pub fn target(&self, j: usize) -> &[f64] {
        &self.targets[j * self.output_dim..(j + 1) * self.output_dim]
    }

    pub fn inputs(&self) -> impl Iterator<Item = &[f64]> {
        self.inputs.chunks_exact(self.input_dim)
    }

    pub fn target_column(&self, i: usize) -> DVector<f64> {
        DVector::from_iterator(self.len(), (0..self.len()).map(|j| self.target(j)[i]))
    }

    /// Appends one transition, keeping the row layout.
    pub fn push(&mut self, input: &[f64], target: &[f64]) -> Result<()> {
        check_dim(self.input_dim, input.len())?;
        check_dim(self.output_dim, target.len())?;
        self.inputs.extend_from_slice(input);
        self.targets.extend_from_slice(target);
        Ok(())
    }
}

/// One output dimension of a trained model.
#[derive(Debug, Clone)]
pub struct OutputGp {
    hyp: Hyperparams,
    /// Lower Cholesky factor of `K + (sigma_n^2 + jitter) I`.
    chol: DMatrix<f64>,
    /// `(K + sigma_n^2 I)^-1 y`.
    weights: DVector<f64>,
    log_marginal_likelihood: f64,
}

impl OutputGp {
    fn new(data: &Dataset, i: usize, hyp: Hyperparams) -> Result<Self> {
        check_dim(data.input_dim(), hyp.input_dim())?;
        let gram = gram_matrix(data, &hyp);
        let chol = nalgebra::Cholesky::new(gram).ok_or(Error::NotPositiveDefinite { dim: i })?;
        let y = data.target_column(i);
        let weights = chol.solve(&y);
        let l = chol.unpack();
        let log_det_half: f64 = l.diagonal().iter().map(|d| d.ln()).sum();
        let m = data.len() as f64;
        let lml = -0.5 * y.dot(&weights) - log_det_half - 0.5 * m * (2.0 * std::f64::consts::PI).ln();
        Ok(Self {
            hyp,
            chol: l,
            weights,
            log_marginal_likelihood: lml,
        })
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyp
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn cholesky_factor(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal_likelihood
    }

    /// `k(x, D)` as a column vector.
    pub fn kernel_column(&self, data: &Dataset, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(data.len(), data.inputs().map(|xj| self.hyp.k(x, xj)))
    }

    /// Solves `L v = k`.
    pub fn whiten(&self, k: &DVector<f64>) -> DVector<f64> {
        self.chol
            .solve_lower_triangular(k)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `(K + sigma_n^2 I)^-1 v` using the cached factor.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let w = self.whiten(v);
        self.chol
            .tr_solve_lower_triangular(&w)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `k(x,D) K^-1 k(x,D)^T`.
    pub fn explained_variance(&self, k: &DVector<f64>) -> f64 {
        self.whiten(k).norm_squared()
    }
}

fn gram_matrix(data: &Dataset, hyp: &Hyperparams) -> DMatrix<f64> {
    let m = data.len();
    let mut gram = DMatrix::zeros(m, m);
    for a in 0..m {
        let xa = data.input(a);
        for b in 0..a {
            let v = hyp.k(xa, data.input(b));
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
        gram[(a, a)] = hyp.signal_variance * (1.0 + JITTER) + hyp.noise_variance;
    }
    gram
}

/// Trained multi-output GP. Immutable after construction.
#[derive(Debug, Clone)]
pub struct GpModel {
    data: Dataset,
    outputs: Vec<OutputGp>,
}

impl GpModel {
    pub fn new(data: Dataset, hyperparams: Vec<Hyperparams>) -> Result<Self> {
        check_dim(data.output_dim(), hyperparams.len())?;
        let outputs = hyperparams
            .into_iter()
            .enumerate()
            .map(|(i, h)| {
                h.validate()?;
                OutputGp::new(&data, i, h)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { data, outputs })
    }

    /// Fits hyperparameters by marginal likelihood and conditions on `data`.
    pub fn fit(data: Dataset, options: &FitOptions) -> Result<(Self, FitReport)> {
        let report = fit_hyperparameters(&data, options)?;
        let model = Self::new(data, report.hyperparams.clone())?;
        Ok((model, report))
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn input_dim(&self) -> usize {
        self.data.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.data.output_dim()
    }

    pub fn output(&self, i: usize) -> &OutputGp {
        &self.outputs[i]
    }

    pub fn outputs(&self) -> &[OutputGp] {
        &self.outputs
    }

    pub fn hyperparams(&self) -> Vec<Hyperparams> {
        self.outputs.iter().map(|o| o.hyp.clone()).collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        check_dim(self.input_dim(), x.len())?;
        if x.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("test input"))
        }
    }

    /// Posterior mean of output `i` (no input checks).
    pub fn mean_dim(&self, i: usize, x: &[f64]) -> f64 {
        let out = &self.outputs[i];
        self.data
            .inputs()
            .zip(out.weights.iter())
            .map(|(xj, w)| w * out.hyp.k(x, xj))
            .sum()
    }

    /// Latent posterior variance of output `i`, clamped at zero.
    pub fn variance_dim(&self, i: usize, x: &[f64]) -> Result<f64> {
        let out = &self.outputs[i];
        let k = out.kernel_column(&self.data, x);
        let v = out.hyp.signal_variance - out.explained_variance(&k);
        if v < -NEGATIVE_VARIANCE_TOL * out.hyp.signal_variance {
            return Err(Error::NegativeVariance { dim: i, value: v });
        }
        Ok(v.max(0.0))
    }

    pub fn posterior_mean(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok((0..self.output_dim()).map(|i| self.mean_dim(i, x)).collect())
    }

    pub fn posterior_variance(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        (0..self.output_dim()).map(|i| self.variance_dim(i, x)).collect()
    }

    /// Mean and latent variance per output dimension.
    pub fn predict(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        let mut mean = Vec::with_capacity(self.output_dim());
        let mut var = Vec::with_capacity(self.output_dim());
        for (i, out) in self.outputs.iter().enumerate() {
            let k = out.kernel_column(&self.data, x);
            mean.push(k.dot(&out.weights));
            let v = out.hyp.signal_variance - out.explained_variance(&k);
            if v < -NEGATIVE_VARIANCE_TOL * out.hyp.signal_variance {
                return Err(Error::NegativeVariance { dim: i, value: v });
            }
            var.push(v.max(0.0));
        }
        Ok((mean, var))
    }

    /// Latent posterior cross-covariance `Sigma(x1, x2)` of output `i`.
    pub fn posterior_covariance(&self, i: usize, x1: &[f64], x2: &[f64]) -> Result<f64> {
        self.check_input(x1)?;
        self.check_input(x2)?;
        let out = &self.outputs[i];
        let v1 = out.whiten(&out.kernel_column(&self.data, x1));
        let v2 = out.whiten(&out.kernel_column(&self.data, x2));
        Ok(out.hyp.k(x1, x2) - v1.dot(&v2))
    }

    /// Canonical (pseudo-)metric `sqrt(Var[f_i(x1) - f_i(x2)])` under the posterior.
    pub fn canonical_distance(&self, i: usize, x1: &[f64], x2: &[f64]) -> Result<f64> {
        self.check_input(x1)?;
        self.check_input(x2)?;
        let out = &self.outputs[i];
        let v1 = out.whiten(&out.kernel_column(&self.data, x1));
        let v2 = out.whiten(&out.kernel_column(&self.data, x2));
        // Var[f(x1) - f(x2)] = k(x1,x1) + k(x2,x2) - 2k(x1,x2) - |v1 - v2|^2
        let prior = 2.0 * (out.hyp.signal_variance - out.hyp.k(x1, x2));
        Ok((prior - (v1 - v2).norm_squared()).max(0.0).sqrt())
    }

    pub fn log_marginal_likelihood(&self) -> Vec<f64> {
        self.outputs.iter().map(|o| o.log_marginal_likelihood).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy() -> GpModel {
        let data = Dataset::new(
            vec![vec![-1.0], vec![0.2], vec![1.5]],
            vec![vec![0.3], vec![-0.4], vec![1.1]],
        )
        .unwrap();
        let h = Hyperparams::isotropic(1.3, 0.8, 0.0, 1).unwrap();
        GpModel::new(data, vec![h]).unwrap()
    }

    #[test]
    fn kernel_closed_form() {
        let h = Hyperparams::isotropic(2.0, 1.0, 0.0, 1).unwrap();
        assert_relative_eq!(kernel_eval(&h, &[0.0], &[1.0]).unwrap(), 2.0 * (-0.5f64).exp());
        assert_eq!(kernel_eval(&h, &[0.7], &[0.7]).unwrap(), 2.0);
        assert_eq!(kernel_eval(&h, &[0.0], &[1e6]).unwrap(), 0.0);
        assert!(matches!(
            kernel_eval(&h, &[0.0, 1.0], &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn kernel_symmetric_and_decreasing() {
        let h = Hyperparams::new(1.0, vec![0.5, 2.0], 0.0).unwrap();
        let a = [0.3, -1.0];
        let b = [1.1, 0.4];
        assert_eq!(h.k(&a, &b), h.k(&b, &a));
        let mut prev = f64::INFINITY;
        for s in 0..20 {
            let v = h.k(&[0.0, 0.0], &[0.1 * s as f64, 0.0]);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn noiseless_interpolation() {
        let m = toy();
        for j in 0..3 {
            let x = m.dataset().input(j).to_vec();
            let y = m.dataset().target(j)[0];
            assert_relative_eq!(m.posterior_mean(&x).unwrap()[0], y, epsilon = 1e-6);
            assert!(m.posterior_variance(&x).unwrap()[0].abs() < 1e-7);
        }
    }

    #[test]
    fn prior_reversion_far_away() {
        let m = toy();
        let (mu, var) = m.predict(&[50.0]).unwrap();
        assert!(mu[0].abs() < 1e-12);
        assert_relative_eq!(var[0], 1.3, epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = toy();
        assert!(matches!(m.posterior_mean(&[f64::NAN]), Err(Error::NonFinite(_))));
        assert!(m.posterior_mean(&[0.0, 1.0]).is_err());
        assert!(Hyperparams::new(-1.0, vec![1.0], 0.0).is_err());
        assert!(Hyperparams::new(1.0, vec![0.0], 0.0).is_err());
        assert!(Hyperparams::new(1.0, vec![1.0], -1e-3).is_err());
        assert!(Dataset::new(vec![], vec![]).is_err());
        assert!(Dataset::new(vec![vec![1.0], vec![1.0, 2.0]], vec![vec![0.0], vec![0.0]]).is_err());
    }

    #[test]
    fn covariance_matches_variance_on_diagonal() {
        let m = toy();
        let x = [0.6];
        assert_relative_eq!(
            m.posterior_covariance(0, &x, &x).unwrap(),
            m.posterior_variance(&x).unwrap()[0],
            epsilon = 1e-12
        );
        assert_eq!(m.canonical_distance(0, &x, &x).unwrap(), 0.0);
    }
}

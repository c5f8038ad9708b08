//! Monte-Carlo trajectories and coverage statistics for tubes and MM bands.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::Controls;
use crate::env::SystemSpec;
use crate::error::{check_dim, Error, Result};
use crate::gp::GpModel;
use crate::moments::GaussianBelief;
use crate::tube::BoundSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    GpPosterior,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    /// `states[i][t]` is the state of trajectory `i` at step `t`.
    pub states: Vec<Vec<Vec<f64>>>,
    pub seed: u64,
    pub mode: SamplingMode,
    pub include_noise: bool,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.states.first().map_or(0, |s| s.len().saturating_sub(1))
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().and_then(|s| s.first()).map_or(0, Vec::len)
    }

    /// Long-format CSV: `traj, t, x_1, ..., x_n`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["traj".to_string(), "t".to_string()];
        header.extend((1..=self.state_dim()).map(|i| format!("x_{i}")));
        wr.write_record(&header)?;
        for (i, traj) in self.states.iter().enumerate() {
            for (t, x) in traj.iter().enumerate() {
                let mut row = vec![i.to_string(), t.to_string()];
                row.extend(x.iter().map(f64::to_string));
                wr.write_record(&row)?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

/// Independent stream for trajectory `index`.
fn trajectory_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Square-root factor of a PSD covariance.
fn sqrt_factor(c: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = c.clone().symmetric_eigen();
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s)
}

fn draw_initial<R: Rng>(init: &GaussianBelief, factor: &DMatrix<f64>, rng: &mut R) -> Vec<f64> {
    let z = DVector::from_iterator(init.dim(), (0..init.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let x = factor * z;
    init.mean.iter().zip(x.iter()).map(|(m, d)| m + d).collect()
}

fn check_sampling(n: usize, horizon: usize, init: &GaussianBelief, controls: &Controls) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one trajectory".into()));
    }
    controls.validate(init.dim(), horizon)
}

/// Trajectories drawn step by step from the GP posterior predictive.
///
/// Each step draws `x_{t+1} ~ N(mean(x_t, u_t), var(x_t, u_t))` independently per
/// output; the observation noise is added to the variance when `include_noise`.
pub fn sample_gp_trajectories(
    m: &GpModel,
    init: &GaussianBelief,
    controls: &Controls,
    horizon: usize,
    n: usize,
    seed: u64,
    include_noise: bool,
) -> Result<TrajectoryBatch> {
    check_sampling(n, horizon, init, controls)?;
    check_dim(m.output_dim(), init.dim())?;
    check_dim(m.input_dim(), init.dim() + controls.control_dim())?;
    let factor = sqrt_factor(&init.covariance);
    let noise: Vec<f64> = m.hyperparams().iter().map(|h| h.noise_variance).collect();
    let states = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(seed, i);
            let mut x = draw_initial(init, &factor, &mut rng);
            let mut traj = Vec::with_capacity(horizon + 1);
            traj.push(x.clone());
            for t in 0..horizon {
                let mut input = x.clone();
                input.extend(controls.at(t, &x)?);
                let (mean, var) = m.predict(&input)?;
                x = mean
                    .iter()
                    .zip(&var)
                    .zip(&noise)
                    .map(|((mu, v), nv)| {
                        let v = if include_noise { v + nv } else { *v };
                        mu + v.sqrt() * rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect();
                traj.push(x.clone());
            }
            Ok(traj)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryBatch {
        states,
        seed,
        mode: SamplingMode::GpPosterior,
        include_noise,
    })
}

/// Trajectories of the ground-truth system, including its process noise.
pub fn sample_system_trajectories(
    s: &SystemSpec,
    init: &GaussianBelief,
    controls: &Controls,
    horizon: usize,
    n: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    s.validate()?;
    check_sampling(n, horizon, init, controls)?;
    check_dim(s.state_dim(), init.dim())?;
    let factor = sqrt_factor(&init.covariance);
    let states = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = trajectory_rng(seed, i);
            let mut x = draw_initial(init, &factor, &mut rng);
            let mut traj = Vec::with_capacity(horizon + 1);
            traj.push(x.clone());
            for t in 0..horizon {
                let u = controls.at(t, &x)?;
                x = s.step(&x, &u, &mut rng)?;
                traj.push(x.clone());
            }
            Ok(traj)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryBatch {
        states,
        seed,
        mode: SamplingMode::GroundTruth,
        include_noise: true,
    })
}

fn check_shapes(batch: &TrajectoryBatch, schedule: &BoundSchedule) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory batch".into()));
    }
    if schedule.steps.len() != batch.horizon() + 1 {
        return Err(Error::InvalidArgument(format!(
            "schedule covers {} steps, trajectories have {}",
            schedule.steps.len(),
            batch.horizon() + 1
        )));
    }
    for traj in &batch.states {
        check_dim(batch.horizon() + 1, traj.len())?;
        for (x, s) in traj.iter().zip(&schedule.steps) {
            check_dim(s.center.len(), x.len())?;
        }
    }
    Ok(())
}

/// Fraction of transitions `(i, t)`, `t = 1..=H`, that end outside the tube.
pub fn violation_ratio(batch: &TrajectoryBatch, schedule: &BoundSchedule) -> Result<f64> {
    check_shapes(batch, schedule)?;
    let h = batch.horizon();
    if h == 0 {
        return Ok(0.0);
    }
    let outside: usize = batch
        .states
        .iter()
        .map(|traj| (1..=h).filter(|&t| !schedule.steps[t].contains(&traj[t])).count())
        .sum();
    Ok(outside as f64 / (batch.len() * h) as f64)
}

/// Fraction of trajectories inside the tube at each step `t = 0..=H`.
pub fn per_step_coverage(batch: &TrajectoryBatch, schedule: &BoundSchedule) -> Result<Vec<f64>> {
    check_shapes(batch, schedule)?;
    let n = batch.len() as f64;
    Ok(schedule
        .steps
        .iter()
        .enumerate()
        .map(|(t, s)| batch.states.iter().filter(|traj| s.contains(&traj[t])).count() as f64 / n)
        .collect())
}

/// Fraction of trajectories inside the tube at every step.
pub fn trajectory_containment(batch: &TrajectoryBatch, schedule: &BoundSchedule) -> Result<f64> {
    check_shapes(batch, schedule)?;
    let inside = batch
        .states
        .iter()
        .filter(|traj| traj.iter().zip(&schedule.steps).all(|(x, s)| s.contains(x)))
        .count();
    Ok(inside as f64 / batch.len() as f64)
}

/// Per step, fraction of samples with every coordinate within `mean +- k sd`.
pub fn mm_coverage(batch: &TrajectoryBatch, rollout: &[GaussianBelief], k: f64) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty trajectory batch".into()));
    }
    if rollout.len() != batch.horizon() + 1 {
        return Err(Error::InvalidArgument(format!(
            "rollout covers {} steps, trajectories have {}",
            rollout.len(),
            batch.horizon() + 1
        )));
    }
    let n = batch.len() as f64;
    Ok(rollout
        .iter()
        .enumerate()
        .map(|(t, b)| {
            let sd = b.std_devs();
            batch
                .states
                .iter()
                .filter(|traj| {
                    traj[t]
                        .iter()
                        .zip(&b.mean)
                        .zip(&sd)
                        .all(|((x, m), s)| (x - m).abs() <= k * s)
                })
                .count() as f64
                / n
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationSummary {
    pub preset: String,
    pub epsilon: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub violation_ratio: f64,
    pub per_step_coverage: Vec<f64>,
    pub trajectory_containment: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mm_coverage: Option<Vec<f64>>,
}

impl ValidationSummary {
    pub fn new(
        preset: &str,
        batch: &TrajectoryBatch,
        schedule: &BoundSchedule,
        mm: Option<(&[GaussianBelief], f64)>,
    ) -> Result<Self> {
        Ok(Self {
            preset: preset.to_string(),
            epsilon: schedule.epsilon,
            n: batch.len(),
            violation_ratio: violation_ratio(batch, schedule)?,
            per_step_coverage: per_step_coverage(batch, schedule)?,
            trajectory_containment: trajectory_containment(batch, schedule)?,
            mm_coverage: mm.map(|(r, k)| mm_coverage(batch, r, k)).transpose()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::IntervalBox;
    use crate::tube::StepCertificate;

    fn schedule(ks: &[f64]) -> BoundSchedule {
        BoundSchedule {
            epsilon: 0.1,
            horizon: ks.len() - 1,
            steps: ks
                .iter()
                .enumerate()
                .map(|(t, k)| StepCertificate {
                    t,
                    k: *k,
                    p: 0.0,
                    center: vec![0.0],
                    region: IntervalBox::around(&[0.0], k.min(1e6)).unwrap(),
                    diagnostics: None,
                })
                .collect(),
        }
    }

    fn batch(states: Vec<Vec<Vec<f64>>>) -> TrajectoryBatch {
        TrajectoryBatch {
            states,
            seed: 0,
            mode: SamplingMode::GroundTruth,
            include_noise: false,
        }
    }

    #[test]
    fn hand_counted_violations() {
        let b = batch(vec![
            vec![vec![0.0], vec![0.5], vec![0.2]],
            vec![vec![0.0], vec![-0.1], vec![1.5]],
        ]);
        let s = schedule(&[1.0, 1.0, 1.0]);
        assert_eq!(violation_ratio(&b, &s).unwrap(), 0.25);
        assert_eq!(per_step_coverage(&b, &s).unwrap(), vec![1.0, 1.0, 0.5]);
        assert_eq!(trajectory_containment(&b, &s).unwrap(), 0.5);
    }

    #[test]
    fn extreme_radii() {
        let b = batch(vec![vec![vec![0.3], vec![0.1]], vec![vec![-0.3], vec![0.2]]]);
        assert_eq!(violation_ratio(&b, &schedule(&[f64::INFINITY, f64::INFINITY])).unwrap(), 0.0);
        assert_eq!(violation_ratio(&b, &schedule(&[0.0, 0.0])).unwrap(), 1.0);
        assert!(violation_ratio(&b, &schedule(&[1.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn mm_band_extremes() {
        let b = batch(vec![vec![vec![0.3]], vec![vec![-0.2]]]);
        let r = vec![GaussianBelief::diagonal(vec![0.0], &[0.04]).unwrap()];
        assert_eq!(mm_coverage(&b, &r, 1e9).unwrap(), vec![1.0]);
        assert_eq!(mm_coverage(&b, &r, 0.0).unwrap(), vec![0.0]);
        assert_eq!(mm_coverage(&b, &r, 1.25).unwrap(), vec![0.5]);
    }
}

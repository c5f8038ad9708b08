//! Ground-truth systems used to generate training data and to validate tubes.

mod presets;

pub use presets::{preset, preset_variants, Preset, PRESET_NAMES};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bounds::IntervalBox;
use crate::error::{check_dim, Error, Result};
use crate::gp::Dataset;

/// Continuous mountain car constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MountainCarParams {
    pub power: f64,
    pub gravity: f64,
    pub hill_frequency: f64,
    pub max_speed: f64,
    pub min_position: f64,
    pub max_position: f64,
    pub max_force: f64,
}

impl Default for MountainCarParams {
    fn default() -> Self {
        Self {
            power: 0.0015,
            gravity: 0.0025,
            hill_frequency: 3.0,
            max_speed: 0.07,
            min_position: -1.2,
            max_position: 0.6,
            max_force: 1.0,
        }
    }
}

impl MountainCarParams {
    pub fn state_space(&self) -> IntervalBox {
        IntervalBox::new(
            vec![self.min_position, -self.max_speed],
            vec![self.max_position, self.max_speed],
        )
        .expect("ordered constants")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Dynamics {
    /// Forward Euler of `dx_i/dt = A_i x + x^T Q_i x + B_i u`.
    LinearQuadratic {
        a: Vec<Vec<f64>>,
        /// One matrix per state dimension, or empty for a linear system.
        #[serde(default)]
        q: Vec<Vec<Vec<f64>>>,
        /// `n x m`; rows may be empty for an autonomous system.
        b: Vec<Vec<f64>>,
        dt: f64,
    },
    MountainCar(MountainCarParams),
    /// `sign(x) x^4` for `|x| < 1`, identity otherwise.
    PiecewiseQuartic,
    /// Nearest-neighbour lookup in a transition table.
    CustomTable {
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub dynamics: Dynamics,
    /// Standard deviation of additive Gaussian noise per state dimension.
    pub process_noise: Vec<f64>,
}

impl SystemSpec {
    pub fn state_dim(&self) -> usize {
        match &self.dynamics {
            Dynamics::LinearQuadratic { a, .. } => a.len(),
            Dynamics::MountainCar(_) => 2,
            Dynamics::PiecewiseQuartic => 1,
            Dynamics::CustomTable { targets, .. } => targets.first().map_or(0, Vec::len),
        }
    }

    pub fn control_dim(&self) -> usize {
        match &self.dynamics {
            Dynamics::LinearQuadratic { b, .. } => b.first().map_or(0, Vec::len),
            Dynamics::MountainCar(_) => 1,
            Dynamics::PiecewiseQuartic => 0,
            Dynamics::CustomTable { inputs, targets } => {
                inputs.first().map_or(0, Vec::len) - targets.first().map_or(0, Vec::len)
            }
        }
    }

    /// State bounds the dynamics never leave, where known.
    pub fn state_space(&self) -> Option<IntervalBox> {
        match &self.dynamics {
            Dynamics::MountainCar(p) => Some(p.state_space()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        if n == 0 {
            return Err(Error::InvalidArgument("system has no state dimensions".into()));
        }
        check_dim(n, self.process_noise.len())?;
        if self.process_noise.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument("process noise must be non-negative".into()));
        }
        match &self.dynamics {
            Dynamics::LinearQuadratic { a, q, b, dt } => {
                if !(*dt > 0.0 && dt.is_finite()) {
                    return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
                }
                check_dim(n, b.len())?;
                let m = self.control_dim();
                for row in a {
                    check_dim(n, row.len())?;
                }
                for row in b {
                    check_dim(m, row.len())?;
                }
                if !q.is_empty() {
                    check_dim(n, q.len())?;
                    for qi in q {
                        check_dim(n, qi.len())?;
                        for row in qi {
                            check_dim(n, row.len())?;
                        }
                    }
                }
            }
            Dynamics::MountainCar(p) => {
                if !(p.min_position < p.max_position && p.max_speed > 0.0 && p.max_force > 0.0) {
                    return Err(Error::InvalidArgument("inconsistent mountain car constants".into()));
                }
            }
            Dynamics::PiecewiseQuartic => {}
            Dynamics::CustomTable { inputs, targets } => {
                if inputs.is_empty() {
                    return Err(Error::InvalidArgument("empty transition table".into()));
                }
                check_dim(inputs.len(), targets.len())?;
                let d = inputs[0].len();
                if d < n {
                    return Err(Error::InvalidArgument("table inputs shorter than the state".into()));
                }
                for (x, y) in inputs.iter().zip(targets) {
                    check_dim(d, x.len())?;
                    check_dim(n, y.len())?;
                }
            }
        }
        Ok(())
    }

    /// Noise-free transition.
    pub fn transition(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.state_dim(), x.len())?;
        check_dim(self.control_dim(), u.len())?;
        Ok(match &self.dynamics {
            Dynamics::LinearQuadratic { a, q, b, dt } => (0..x.len())
                .map(|i| {
                    let lin: f64 = a[i].iter().zip(x).map(|(c, v)| c * v).sum();
                    let quad: f64 = q.get(i).map_or(0.0, |qi| {
                        qi.iter()
                            .zip(x)
                            .map(|(row, xr)| xr * row.iter().zip(x).map(|(c, v)| c * v).sum::<f64>())
                            .sum()
                    });
                    let ctl: f64 = b[i].iter().zip(u).map(|(c, v)| c * v).sum();
                    x[i] + dt * (lin + quad + ctl)
                })
                .collect(),
            Dynamics::MountainCar(p) => mountain_car(p, x, u[0]),
            Dynamics::PiecewiseQuartic => vec![quartic(x[0])],
            Dynamics::CustomTable { inputs, targets } => {
                let mut key = x.to_vec();
                key.extend_from_slice(u);
                let nearest = inputs
                    .iter()
                    .map(|r| r.iter().zip(&key).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(j, _)| j)
                    .expect("non-empty table");
                targets[nearest].clone()
            }
        })
    }

    /// One noisy transition.
    pub fn step<R: Rng + ?Sized>(&self, x: &[f64], u: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        let mut next = self.transition(x, u)?;
        for (v, s) in next.iter_mut().zip(&self.process_noise) {
            if *s > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                *v += s * z;
            }
        }
        if let Dynamics::MountainCar(p) = &self.dynamics {
            next[0] = next[0].clamp(p.min_position, p.max_position);
            next[1] = next[1].clamp(-p.max_speed, p.max_speed);
        }
        Ok(next)
    }
}

fn quartic(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x.signum() * x.powi(4)
    } else {
        x
    }
}

fn mountain_car(p: &MountainCarParams, x: &[f64], u: f64) -> Vec<f64> {
    let force = u.clamp(-p.max_force, p.max_force);
    let mut velocity = x[1] + force * p.power - p.gravity * (p.hill_frequency * x[0]).cos();
    velocity = velocity.clamp(-p.max_speed, p.max_speed);
    let mut position = x[0] + velocity;
    position = position.clamp(p.min_position, p.max_position);
    if position == p.min_position && velocity < 0.0 {
        velocity = 0.0;
    }
    vec![position, velocity]
}

/// How transitions are generated for training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Sampling {
    /// Episodes from uniform starts with uniformly random actions.
    RandomPolicy {
        start: IntervalBox,
        controls: IntervalBox,
        episode_len: usize,
    },
    /// Episodes from uniform starts replaying a control sequence.
    GivenControls { start: IntervalBox, sequence: Vec<Vec<f64>> },
    /// Independent uniform states and controls.
    UniformStates {
        states: IntervalBox,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        controls: Option<IntervalBox>,
    },
}

fn uniform<R: Rng + ?Sized>(b: &IntervalBox, rng: &mut R) -> Vec<f64> {
    b.lower()
        .iter()
        .zip(b.upper())
        .map(|(l, u)| if u > l { rng.random_range(*l..*u) } else { *l })
        .collect()
}

/// `size` transitions `(x, u) -> x'`, deterministic given `seed`.
pub fn collect_dataset(s: &SystemSpec, sampling: &Sampling, size: usize, seed: u64) -> Result<Dataset> {
    s.validate()?;
    if size == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    let n = s.state_dim();
    let m = s.control_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(size * (n + m));
    let mut targets = Vec::with_capacity(size * n);
    let mut push = |x: &[f64], u: &[f64], y: &[f64]| {
        inputs.extend_from_slice(x);
        inputs.extend_from_slice(u);
        targets.extend_from_slice(y);
    };

    match sampling {
        Sampling::RandomPolicy {
            start,
            controls,
            episode_len,
        } => {
            check_dim(n, start.dim())?;
            check_dim(m, controls.dim())?;
            let len = (*episode_len).max(1);
            let mut count = 0;
            while count < size {
                let mut x = uniform(start, &mut rng);
                for _ in 0..len.min(size - count) {
                    let u = uniform(controls, &mut rng);
                    let y = s.step(&x, &u, &mut rng)?;
                    push(&x, &u, &y);
                    x = y;
                    count += 1;
                }
            }
        }
        Sampling::GivenControls { start, sequence } => {
            check_dim(n, start.dim())?;
            if sequence.is_empty() {
                return Err(Error::InvalidArgument("empty control sequence".into()));
            }
            let mut count = 0;
            while count < size {
                let mut x = uniform(start, &mut rng);
                for u in sequence.iter().take(size - count) {
                    let y = s.step(&x, u, &mut rng)?;
                    push(&x, u, &y);
                    x = y;
                    count += 1;
                }
            }
        }
        Sampling::UniformStates { states, controls } => {
            check_dim(n, states.dim())?;
            check_dim(m, controls.as_ref().map_or(0, IntervalBox::dim))?;
            for _ in 0..size {
                let x = uniform(states, &mut rng);
                let u = controls.as_ref().map_or_else(Vec::new, |c| uniform(c, &mut rng));
                let y = s.step(&x, &u, &mut rng)?;
                push(&x, &u, &y);
            }
        }
    }
    Dataset::from_flat(n + m, n, inputs, targets)
}

use serde::{Deserialize, Serialize};

use super::{Dynamics, MountainCarParams, Sampling, SystemSpec};
use crate::bounds::IntervalBox;
use crate::control::{Controls, Policy};
use crate::error::{Error, Result};
use crate::moments::GaussianBelief;
use crate::tube::TubeConfig;

pub const PRESET_NAMES: &[&str] = &[
    "synthetic-1d",
    "quartic",
    "mountain-car",
    "system1",
    "system2",
    "system3",
    "system4",
    "system5",
];

const QUARTIC_VARIANCES: [f64; 6] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];

/// Starting radius shared by the closed-loop systems.
const SYSTEM_START_RADIUS: f64 = 0.165;

/// Step used to discretize the closed-loop systems.
pub const SYSTEM_DT: f64 = 0.1;

/// Process noise of the closed-loop systems.
const SYSTEM_NOISE: f64 = 1e-4;

/// Everything needed to run one benchmark end to end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    pub system: SystemSpec,
    pub controls: Controls,
    pub init_mean: Vec<f64>,
    /// Diagonal of the initial covariance.
    pub init_variance: Vec<f64>,
    pub epsilon: f64,
    pub horizon: usize,
    pub sampling: Sampling,
    pub data_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_radius: Option<f64>,
}

impl Preset {
    pub fn init_belief(&self) -> Result<GaussianBelief> {
        GaussianBelief::diagonal(self.init_mean.clone(), &self.init_variance)
    }

    /// Tube settings implied by the preset on top of the defaults.
    pub fn tube_config(&self) -> TubeConfig {
        TubeConfig {
            epsilon: self.epsilon,
            state_space: self.system.state_space(),
            initial_radius: self.initial_radius,
            ..TubeConfig::default()
        }
    }

    /// Time step of the underlying system, when it has one.
    pub fn dt(&self) -> Option<f64> {
        match &self.system.dynamics {
            Dynamics::LinearQuadratic { dt, .. } => Some(*dt),
            _ => None,
        }
    }
}

fn cube(n: usize, r: f64) -> IntervalBox {
    IntervalBox::new(vec![-r; n], vec![r; n]).expect("symmetric box")
}

fn synthetic_1d() -> Preset {
    Preset {
        name: "synthetic-1d".into(),
        system: SystemSpec {
            dynamics: Dynamics::LinearQuadratic {
                a: vec![vec![-0.2]],
                q: Vec::new(),
                b: vec![Vec::new()],
                dt: 1.0,
            },
            process_noise: vec![0.01],
        },
        controls: Controls::None,
        init_mean: vec![0.0],
        init_variance: vec![0.01],
        epsilon: 0.05,
        horizon: 10,
        sampling: Sampling::UniformStates {
            states: cube(1, 1.0),
            controls: None,
        },
        data_size: 200,
        initial_radius: None,
    }
}

fn quartic(variance: f64) -> Preset {
    Preset {
        name: format!("quartic-s{variance}"),
        system: SystemSpec {
            dynamics: Dynamics::PiecewiseQuartic,
            process_noise: vec![0.01],
        },
        controls: Controls::None,
        init_mean: vec![0.0],
        init_variance: vec![variance],
        epsilon: 0.05,
        horizon: 10,
        sampling: Sampling::UniformStates {
            states: cube(1, 10.0),
            controls: None,
        },
        data_size: 600,
        initial_radius: None,
    }
}

fn mountain_car() -> Preset {
    let params = MountainCarParams::default();
    Preset {
        name: "mountain-car".into(),
        sampling: Sampling::RandomPolicy {
            start: params.state_space(),
            controls: cube(1, 2.0),
            episode_len: 10,
        },
        system: SystemSpec {
            dynamics: Dynamics::MountainCar(params),
            process_noise: vec![1e-4, 1e-5],
        },
        controls: Controls::OpenLoop {
            sequence: vec![vec![1.85], vec![-0.97], vec![1.39], vec![0.17], vec![-1.95]],
        },
        init_mean: vec![-0.5, 0.0],
        init_variance: vec![0.005 * 0.005, 0.0005 * 0.0005],
        epsilon: 0.1,
        horizon: 5,
        data_size: 500,
        initial_radius: None,
    }
}

fn closed_loop(name: &str, a: Vec<Vec<f64>>, q: Vec<Vec<Vec<f64>>>, b: Vec<Vec<f64>>, policy: Policy) -> Preset {
    let n = a.len();
    let m = b[0].len();
    let sd = SYSTEM_START_RADIUS / (4.0 * n as f64);
    Preset {
        name: name.into(),
        system: SystemSpec {
            dynamics: Dynamics::LinearQuadratic {
                a,
                q,
                b,
                dt: SYSTEM_DT,
            },
            process_noise: vec![SYSTEM_NOISE; n],
        },
        controls: Controls::Feedback { policy },
        init_mean: vec![0.0; n],
        init_variance: vec![sd * sd; n],
        epsilon: 0.1,
        horizon: 5,
        sampling: Sampling::UniformStates {
            states: cube(n, 0.5),
            controls: Some(cube(m, 1.0)),
        },
        data_size: 300,
        initial_radius: Some(SYSTEM_START_RADIUS),
    }
}

fn system1(w: f64) -> Preset {
    let name = if w == 0.0 { "system1-w0" } else { "system1" };
    closed_loop(
        name,
        vec![vec![0.05]],
        Vec::new(),
        vec![vec![1.0]],
        Policy::linear(vec![vec![w]]).expect("finite gain"),
    )
}

fn system2() -> Preset {
    closed_loop(
        "system2",
        vec![vec![0.1, 0.0], vec![0.0, -0.4]],
        Vec::new(),
        vec![vec![1.0], vec![0.0]],
        Policy::linear(vec![vec![-0.6, 0.0]]).expect("finite gain"),
    )
}

fn system3() -> Preset {
    closed_loop(
        "system3",
        vec![vec![0.1, 0.08], vec![-0.05, 0.15]],
        Vec::new(),
        vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        Policy::linear(vec![vec![-0.4, 0.0], vec![0.0, -0.5]]).expect("finite gain"),
    )
}

fn system4() -> Preset {
    closed_loop(
        "system4",
        vec![vec![-0.2, 0.05], vec![-0.05, -0.4]],
        vec![
            vec![vec![1.0, 0.0], vec![0.0, 0.0]],
            vec![vec![1.0, 0.0], vec![0.0, 0.2]],
        ],
        vec![vec![1.0], vec![0.0]],
        Policy::sine_squashed(vec![vec![-8.61, -0.02]], vec![1.0]).expect("finite gain"),
    )
}

fn system5() -> Preset {
    closed_loop(
        "system5",
        vec![vec![-0.2, 0.0, -0.0], vec![0.0, -0.3, 0.0], vec![0.0, 0.0, -0.6]],
        Vec::new(),
        vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]],
        Policy::linear(vec![vec![-0.4, 0.0, 0.0], vec![0.0, -0.2, 0.0]]).expect("finite gain"),
    )
}

/// A single preset by name.
///
/// Besides [`PRESET_NAMES`], accepts `system1-w0` (no controller) and
/// `quartic-s<variance>` for any positive initial variance.
pub fn preset(name: &str) -> Result<Preset> {
    match name {
        "synthetic-1d" => Ok(synthetic_1d()),
        "quartic" => Ok(quartic(0.6)),
        "mountain-car" => Ok(mountain_car()),
        "system1" => Ok(system1(-0.2)),
        "system1-w0" => Ok(system1(0.0)),
        "system2" => Ok(system2()),
        "system3" => Ok(system3()),
        "system4" => Ok(system4()),
        "system5" => Ok(system5()),
        other => match other.strip_prefix("quartic-s").and_then(|v| v.parse::<f64>().ok()) {
            Some(v) if v > 0.0 && v.is_finite() => Ok(quartic(v)),
            _ => Err(Error::UnknownPreset(other.into())),
        },
    }
}

/// All variants run for a preset family: both System 1 controllers and the
/// quartic initial-variance sweep; other names yield a single preset.
pub fn preset_variants(name: &str) -> Result<Vec<Preset>> {
    match name {
        "system1" => Ok(vec![system1(0.0), system1(-0.2)]),
        "quartic" => Ok(QUARTIC_VARIANCES.iter().map(|v| quartic(*v)).collect()),
        other => Ok(vec![preset(other)?]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrices(p: &Preset) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
        match &p.system.dynamics {
            Dynamics::LinearQuadratic { a, q, b, .. } => (a.clone(), q.clone(), b.clone()),
            _ => panic!("not linear-quadratic"),
        }
    }

    fn gain(p: &Preset) -> Vec<Vec<f64>> {
        match &p.controls {
            Controls::Feedback { policy } => policy.gain.clone(),
            _ => panic!("not closed loop"),
        }
    }

    #[test]
    fn printed_system_parameters() {
        let s1 = preset_variants("system1").unwrap();
        assert_eq!(matrices(&s1[0]).0, vec![vec![0.05]]);
        assert_eq!(matrices(&s1[0]).2, vec![vec![1.0]]);
        assert_eq!(gain(&s1[0]), vec![vec![0.0]]);
        assert_eq!(gain(&s1[1]), vec![vec![-0.2]]);

        let s4 = preset("system4").unwrap();
        assert_eq!(gain(&s4), vec![vec![-8.61, -0.02]]);
        let (a, q, b) = matrices(&s4);
        assert_eq!(a, vec![vec![-0.2, 0.05], vec![-0.05, -0.4]]);
        assert_eq!(q[1], vec![vec![1.0, 0.0], vec![0.0, 0.2]]);
        assert_eq!(b, vec![vec![1.0], vec![0.0]]);

        let (a5, _, b5) = matrices(&preset("system5").unwrap());
        assert_eq!((a5[0][0], a5[1][1], a5[2][2]), (-0.2, -0.3, -0.6));
        assert_eq!(b5.len(), 3);
    }

    #[test]
    fn paper_settings() {
        let s = preset("synthetic-1d").unwrap();
        assert_eq!((s.init_mean[0], s.init_variance[0], s.horizon, s.epsilon), (0.0, 0.01, 10, 0.05));
        let q = preset_variants("quartic").unwrap();
        assert_eq!(q.len(), 6);
        assert_eq!(q[0].init_variance, vec![0.1]);
        assert_eq!(q[5].init_variance, vec![0.6]);
        assert_eq!(preset("quartic-s0.3").unwrap().init_variance, vec![0.3]);
        let mc = preset("mountain-car").unwrap();
        assert_eq!((mc.data_size, mc.epsilon, mc.horizon), (500, 0.1, 5));
        assert_eq!(preset("system2").unwrap().data_size, 300);
    }

    #[test]
    fn every_preset_validates() {
        for name in PRESET_NAMES {
            for p in preset_variants(name).unwrap() {
                p.system.validate().unwrap();
                p.controls.validate(p.system.state_dim(), p.horizon).unwrap();
                assert_eq!(p.init_mean.len(), p.system.state_dim());
            }
        }
        assert!(matches!(preset("system9"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn stabilized_system1_contracts() {
        let mut p = preset("system1").unwrap();
        p.system.process_noise = vec![0.0];
        let mut x = vec![0.08];
        for t in 0..20 {
            let u = p.controls.at(t, &x).unwrap();
            let y = p.system.transition(&x, &u).unwrap();
            assert!(y[0].abs() < x[0].abs());
            x = y;
        }
    }
}

//! Deterministic control laws and their ranges over state boxes.

use std::f64::consts::{FRAC_PI_2, TAU};

use serde::{Deserialize, Serialize};

use crate::bounds::IntervalBox;
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Linear,
    SineSquashed,
}

/// `u = W x` or `u = u_max * sin(W x)` elementwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub kind: PolicyKind,
    /// Row-major `m x n` gain.
    pub gain: Vec<Vec<f64>>,
    /// Per-control amplitude; only used by the squashed kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u_max: Option<Vec<f64>>,
}

impl Policy {
    pub fn linear(gain: Vec<Vec<f64>>) -> Result<Self> {
        let p = Self {
            kind: PolicyKind::Linear,
            gain,
            u_max: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn sine_squashed(gain: Vec<Vec<f64>>, u_max: Vec<f64>) -> Result<Self> {
        let p = Self {
            kind: PolicyKind::SineSquashed,
            gain,
            u_max: Some(u_max),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gain.is_empty() || self.gain[0].is_empty() {
            return Err(Error::InvalidArgument("policy gain must be non-empty".into()));
        }
        let n = self.gain[0].len();
        for row in &self.gain {
            check_dim(n, row.len())?;
            if !row.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("policy gain"));
            }
        }
        if self.kind == PolicyKind::SineSquashed {
            let amp = self
                .u_max
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("squashed policy needs u_max".into()))?;
            check_dim(self.control_dim(), amp.len())?;
            if !amp.iter().all(|a| a.is_finite() && *a > 0.0) {
                return Err(Error::InvalidArgument("u_max must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn control_dim(&self) -> usize {
        self.gain.len()
    }

    pub fn state_dim(&self) -> usize {
        self.gain[0].len()
    }

    fn amplitude(&self, k: usize) -> f64 {
        self.u_max.as_ref().map_or(1.0, |a| a[k])
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.state_dim(), x.len())?;
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.gain
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let s: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
                match self.kind {
                    PolicyKind::Linear => s,
                    PolicyKind::SineSquashed => self.amplitude(k) * s.sin(),
                }
            })
            .collect()
    }

    /// Per-control interval `[u_lo, u_hi]` over the state box.
    ///
    /// Exact for both kinds: interval arithmetic on `Wx` is exact for a single
    /// linear form over a box, and the sine range is computed on that interval.
    pub fn extrema(&self, b: &IntervalBox) -> Result<IntervalBox> {
        check_dim(self.state_dim(), b.dim())?;
        Ok(self.extrema_unchecked(b))
    }

    pub(crate) fn extrema_unchecked(&self, b: &IntervalBox) -> IntervalBox {
        let mut lo = Vec::with_capacity(self.control_dim());
        let mut hi = Vec::with_capacity(self.control_dim());
        for (k, row) in self.gain.iter().enumerate() {
            let (mut a, mut c) = (0.0, 0.0);
            for (d, w) in row.iter().enumerate() {
                let (p, q) = (w * b.lower()[d], w * b.upper()[d]);
                a += p.min(q);
                c += p.max(q);
            }
            match self.kind {
                PolicyKind::Linear => {
                    lo.push(a);
                    hi.push(c);
                }
                PolicyKind::SineSquashed => {
                    let (s_lo, s_hi) = sine_range(a, c);
                    let amp = self.amplitude(k);
                    lo.push(amp * s_lo);
                    hi.push(amp * s_hi);
                }
            }
        }
        IntervalBox::new(lo, hi).expect("ordered by construction")
    }
}

/// Exact range of `sin` over `[a, b]`.
pub fn sine_range(a: f64, b: f64) -> (f64, f64) {
    if b - a >= TAU {
        return (-1.0, 1.0);
    }
    let (sa, sb) = (a.sin(), b.sin());
    let mut lo = sa.min(sb);
    let mut hi = sa.max(sb);
    // Some pi/2 + 2k pi in [a, b]?
    let k = ((a - FRAC_PI_2) / TAU).ceil();
    if FRAC_PI_2 + k * TAU <= b {
        hi = 1.0;
    }
    let k = ((a + FRAC_PI_2) / TAU).ceil();
    if -FRAC_PI_2 + k * TAU <= b {
        lo = -1.0;
    }
    (lo, hi)
}

/// State box extended by control intervals: the GP input region.
pub fn extend_input_box(b: &IntervalBox, u: &IntervalBox) -> IntervalBox {
    b.concat(u)
}

/// How controls are chosen along a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Controls {
    /// Autonomous system: the GP input is the state alone.
    None,
    /// One control vector per step.
    OpenLoop { sequence: Vec<Vec<f64>> },
    Feedback { policy: Policy },
}

impl Controls {
    pub fn control_dim(&self) -> usize {
        match self {
            Controls::None => 0,
            Controls::OpenLoop { sequence } => sequence.first().map_or(0, Vec::len),
            Controls::Feedback { policy } => policy.control_dim(),
        }
    }

    /// Control applied at step `t` in state `x`.
    pub fn at(&self, t: usize, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Controls::None => Ok(Vec::new()),
            Controls::OpenLoop { sequence } => sequence
                .get(t)
                .cloned()
                .ok_or_else(|| Error::InvalidArgument(format!("open-loop sequence has no control for step {t}"))),
            Controls::Feedback { policy } => policy.eval(x),
        }
    }

    pub fn validate(&self, state_dim: usize, horizon: usize) -> Result<()> {
        match self {
            Controls::None => Ok(()),
            Controls::OpenLoop { sequence } => {
                if sequence.len() < horizon {
                    return Err(Error::InvalidArgument(format!(
                        "open-loop sequence has {} controls, horizon is {horizon}",
                        sequence.len()
                    )));
                }
                let m = self.control_dim();
                for u in sequence {
                    check_dim(m, u.len())?;
                }
                Ok(())
            }
            Controls::Feedback { policy } => {
                policy.validate()?;
                check_dim(state_dim, policy.state_dim())
            }
        }
    }
}

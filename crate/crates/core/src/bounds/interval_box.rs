use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Axis-aligned hyper-rectangle `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl IntervalBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim(lower.len(), upper.len())?;
        if !lower.iter().chain(&upper).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("box bounds"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(Error::InvalidArgument("box lower bound exceeds upper bound".into()));
        }
        Ok(Self { lower, upper })
    }

    pub fn point(x: &[f64]) -> Result<Self> {
        Self::new(x.to_vec(), x.to_vec())
    }

    /// Hypercube of half-width `radius` around `center`.
    pub fn around(center: &[f64], radius: f64) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(Error::InvalidArgument(format!("negative radius {radius}")));
        }
        Self::new(
            center.iter().map(|c| c - radius).collect(),
            center.iter().map(|c| c + radius).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, d: usize) -> f64 {
        self.upper[d] - self.lower[d]
    }

    pub fn widths(&self) -> impl Iterator<Item = f64> + '_ {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l)
    }

    pub fn max_width(&self) -> f64 {
        self.widths().fold(0.0, f64::max)
    }

    /// Number of dimensions with positive width.
    pub fn effective_dim(&self) -> usize {
        self.widths().filter(|&w| w > 0.0).count()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(&self.lower).zip(&self.upper).all(|((v, l), u)| *l <= *v && *v <= *u)
    }

    pub fn contains_box(&self, other: &IntervalBox) -> bool {
        other.dim() == self.dim()
            && (0..self.dim()).all(|d| self.lower[d] <= other.lower[d] && other.upper[d] <= self.upper[d])
    }

    /// Nearest point of the box to `x`.
    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .map(|((v, l), u)| v.clamp(*l, *u))
            .collect()
    }

    pub fn intersect(&self, other: &IntervalBox) -> Option<IntervalBox> {
        if other.dim() != self.dim() {
            return None;
        }
        let lower: Vec<f64> = self.lower.iter().zip(&other.lower).map(|(a, b)| a.max(*b)).collect();
        let upper: Vec<f64> = self.upper.iter().zip(&other.upper).map(|(a, b)| a.min(*b)).collect();
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            None
        } else {
            Some(IntervalBox { lower, upper })
        }
    }

    /// `self × other`.
    pub fn concat(&self, other: &IntervalBox) -> IntervalBox {
        IntervalBox {
            lower: self.lower.iter().chain(&other.lower).copied().collect(),
            upper: self.upper.iter().chain(&other.upper).copied().collect(),
        }
    }

    /// Splits the widest dimension at its midpoint. `None` for a point box.
    pub fn bisect(&self) -> Option<(IntervalBox, IntervalBox)> {
        let (d, w) = self
            .widths()
            .enumerate()
            .fold((0, 0.0), |best, (d, w)| if w > best.1 { (d, w) } else { best });
        if w <= 0.0 {
            return None;
        }
        let mid = 0.5 * (self.lower[d] + self.upper[d]);
        if mid <= self.lower[d] || mid >= self.upper[d] {
            return None;
        }
        let mut left = self.clone();
        let mut right = self.clone();
        left.upper[d] = mid;
        right.lower[d] = mid;
        Some((left, right))
    }

    /// Smallest L1 distance from `x` to the box.
    pub fn l1_distance(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .map(|((v, l), u)| if v < l { l - v } else if v > u { v - u } else { 0.0 })
            .sum()
    }

    /// Evenly spaced grid with `per_dim` points along each axis.
    pub fn grid(&self, per_dim: usize) -> Vec<Vec<f64>> {
        let per_dim = per_dim.max(1);
        let coords: Vec<Vec<f64>> = (0..self.dim())
            .map(|d| {
                if per_dim == 1 {
                    vec![0.5 * (self.lower[d] + self.upper[d])]
                } else {
                    (0..per_dim)
                        .map(|k| (self.lower[d] + self.width(d) * k as f64 / (per_dim - 1) as f64).min(self.upper[d]))
                        .collect()
                }
            })
            .collect();
        let mut out = vec![Vec::with_capacity(self.dim())];
        for c in &coords {
            out = out
                .into_iter()
                .flat_map(|p| {
                    c.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(*v);
                        q
                    })
                })
                .collect();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inverted_and_nonfinite() {
        assert!(IntervalBox::new(vec![1.0], vec![0.0]).is_err());
        assert!(IntervalBox::new(vec![f64::NAN], vec![0.0]).is_err());
        assert!(IntervalBox::new(vec![0.0, 1.0], vec![1.0]).is_err());
    }

    #[test]
    fn bisect_splits_widest() {
        let b = IntervalBox::new(vec![0.0, -2.0], vec![1.0, 2.0]).unwrap();
        let (l, r) = b.bisect().unwrap();
        assert_eq!(l.upper(), &[1.0, 0.0]);
        assert_eq!(r.lower(), &[0.0, 0.0]);
        assert!(IntervalBox::point(&[1.0, 2.0]).unwrap().bisect().is_none());
    }

    #[test]
    fn l1_distance_and_grid() {
        let b = IntervalBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert_eq!(b.l1_distance(&[2.0, -1.0]), 2.0);
        assert_eq!(b.l1_distance(&[0.5, 0.5]), 0.0);
        assert_eq!(b.grid(3).len(), 9);
        assert!(b.grid(3).iter().all(|p| b.contains(p)));
    }
}

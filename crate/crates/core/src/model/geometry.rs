use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;

/// Axis-aligned box `[lo_i, hi_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Bounds, ModelError> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(ModelError::Shape("box bounds must have equal nonzero length".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b) || !a.is_finite() || !b.is_finite()) {
            return Err(ModelError::Invalid(format!("degenerate box {lo:?} x {hi:?}")));
        }
        Ok(Bounds { lo, hi })
    }

    pub fn cube(n: usize, lo: f64, hi: f64) -> Bounds {
        Bounds {
            lo: vec![lo; n],
            hi: vec![hi; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    /// Shrinks every side inward by `frac` of the side length.
    pub fn shrink(&self, frac: f64) -> Bounds {
        let (lo, hi) = (0..self.dim())
            .map(|i| {
                let d = frac * self.width(i);
                (self.lo[i] + d, self.hi[i] - d)
            })
            .unzip();
        Bounds { lo, hi }
    }

    /// Coordinates `range` of the box.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Bounds {
        Bounds {
            lo: self.lo[range.clone()].to_vec(),
            hi: self.hi[range].to_vec(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| a + (b - a) * rng.random::<f64>())
            .collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn diameter(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i).powi(2)).sum::<f64>().sqrt()
    }
}

/// Terminal set used both as a rate-minimization target and as an event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Region {
    /// Closed ball; radius 0 means an exact endpoint.
    Ball { center: Vec<f64>, radius: f64 },
    /// `{z : normal . z >= offset}`.
    HalfSpace { normal: Vec<f64>, offset: f64 },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

impl Region {
    pub fn dim(&self) -> usize {
        match self {
            Region::Ball { center, .. } => center.len(),
            Region::HalfSpace { normal, .. } => normal.len(),
        }
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        self.signed_distance(z) <= 0.0
    }

    /// Negative inside, positive outside, Euclidean for both kinds.
    pub fn signed_distance(&self, z: &[f64]) -> f64 {
        match self {
            Region::Ball { center, radius } => dist(z, center) - radius,
            Region::HalfSpace { normal, offset } => {
                (offset - dot(normal, z)) / dot(normal, normal).sqrt()
            }
        }
    }

    /// Infeasibility vector: zero exactly on the region. A point target keeps
    /// the full displacement so the squared penalty stays smooth.
    pub fn residual(&self, z: &[f64]) -> Vec<f64> {
        match self {
            Region::Ball { center, radius } if *radius == 0.0 => {
                z.iter().zip(center).map(|(a, b)| a - b).collect()
            }
            _ => vec![self.signed_distance(z).max(0.0)],
        }
    }

    pub fn residual_len(&self) -> usize {
        match self {
            Region::Ball { center, radius } if *radius == 0.0 => center.len(),
            _ => 1,
        }
    }

    /// Nearest point of the region to `from`.
    pub fn anchor(&self, from: &[f64]) -> Vec<f64> {
        let d = self.signed_distance(from);
        if d <= 0.0 {
            return from.to_vec();
        }
        match self {
            Region::Ball { center, radius } => {
                let r = dist(from, center);
                center
                    .iter()
                    .zip(from)
                    .map(|(c, f)| c + (f - c) * radius / r)
                    .collect()
            }
            Region::HalfSpace { normal, .. } => {
                let nn = dot(normal, normal).sqrt();
                from.iter().zip(normal).map(|(f, n)| f + d * n / nn).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_space_distance_and_anchor() {
        let h = Region::HalfSpace {
            normal: vec![0.0, 2.0],
            offset: 2.0,
        };
        assert!((h.signed_distance(&[0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert_eq!(h.anchor(&[3.0, 0.0]), vec![3.0, 1.0]);
        assert!(h.contains(&[0.0, 1.0]));
        assert_eq!(h.residual(&[0.0, 3.0]), vec![0.0]);
    }

    #[test]
    fn point_target_residual_is_displacement() {
        let b = Region::Ball {
            center: vec![1.0, 2.0],
            radius: 0.0,
        };
        assert_eq!(b.residual(&[0.5, 2.0]), vec![-0.5, 0.0]);
        assert_eq!(b.anchor(&[0.0, 0.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn shrink_keeps_center() {
        let b = Bounds::cube(2, -5.0, 5.0).shrink(0.2);
        assert_eq!(b.lo, vec![-3.0, -3.0]);
        assert_eq!(b.hi, vec![3.0, 3.0]);
    }
}

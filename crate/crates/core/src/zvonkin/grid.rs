use serde::{Deserialize, Serialize};

use super::ZvonkinError;
use crate::model::Bounds;

/// Uniform tensor grid with `resolution` nodes per axis, first axis fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub bounds: Bounds,
    pub resolution: usize,
}

impl Grid {
    pub fn new(bounds: Bounds, resolution: usize) -> Result<Grid, ZvonkinError> {
        if resolution < 3 {
            return Err(ZvonkinError::Resolution(resolution));
        }
        Ok(Grid { bounds, resolution })
    }

    pub fn dim(&self) -> usize {
        self.bounds.dim()
    }

    pub fn h(&self, axis: usize) -> f64 {
        self.bounds.width(axis) / (self.resolution - 1) as f64
    }

    pub fn n_nodes(&self) -> usize {
        self.resolution.pow(self.dim() as u32)
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.resolution.pow(axis as u32)
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        (0..self.dim())
            .map(|_| {
                let i = idx % self.resolution;
                idx /= self.resolution;
                i
            })
            .collect()
    }

    pub fn node(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.coord(a, i))
            .collect()
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        if i == self.resolution - 1 {
            self.bounds.hi[axis]
        } else {
            self.bounds.lo[axis] + i as f64 * self.h(axis)
        }
    }

    /// Neighbour index along `axis` at offset `step`, reflected at the
    /// boundary (the ghost-node image used by the Neumann condition).
    pub fn reflect(&self, idx: usize, axis: usize, step: isize) -> usize {
        let n = self.resolution as isize;
        let i = ((idx / self.stride(axis)) % self.resolution) as isize;
        let mut j = i + step;
        if j < 0 {
            j = -j;
        }
        if j > n - 1 {
            j = 2 * (n - 1) - j;
        }
        (idx as isize + (j - i) * self.stride(axis) as isize) as usize
    }

    /// Cell index and local coordinate in `[0, 1]` per axis. Coordinates
    /// within 1e-9 cells of a node snap to it so nodes evaluate exactly.
    fn locate(&self, x: &[f64]) -> Result<([usize; 4], [f64; 4]), ZvonkinError> {
        let mut base = [0usize; 4];
        let mut frac = [0.0f64; 4];
        for a in 0..self.dim() {
            let (lo, hi) = (self.bounds.lo[a], self.bounds.hi[a]);
            if !(x[a] >= lo && x[a] <= hi) {
                return Err(ZvonkinError::OutsideBox(x.to_vec()));
            }
            let t = (x[a] - lo) / self.h(a);
            let r = t.round();
            let t = if (t - r).abs() < 1e-9 { r } else { t };
            let i = (t.floor() as usize).min(self.resolution - 2);
            base[a] = i;
            frac[a] = t - i as f64;
        }
        Ok((base, frac))
    }
}

/// Vector-valued function sampled on a grid, `m` components per node.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub grid: Grid,
    pub m: usize,
    /// Node-major: `values[node * m + k]`.
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(grid: Grid, m: usize) -> GridFunction {
        let n = grid.n_nodes();
        GridFunction {
            grid,
            m,
            values: vec![0.0; n * m],
        }
    }

    pub fn at_node(&self, idx: usize) -> &[f64] {
        &self.values[idx * self.m..(idx + 1) * self.m]
    }

    /// Multilinear interpolation.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<(), ZvonkinError> {
        let d = self.grid.dim();
        if d > 4 {
            return Err(ZvonkinError::Resolution(d));
        }
        let (base, frac) = self.grid.locate(x)?;
        let m = self.m;
        if d == 1 {
            let i = base[0];
            let t = frac[0];
            let (a, b) = (&self.values[i * m..(i + 1) * m], &self.values[(i + 1) * m..(i + 2) * m]);
            for k in 0..m {
                out[k] = if t == 0.0 { a[k] } else { a[k] * (1.0 - t) + b[k] * t };
            }
            return Ok(());
        }
        out[..m].fill(0.0);
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0;
            for a in 0..d {
                let up = corner >> a & 1;
                w *= if up == 1 { frac[a] } else { 1.0 - frac[a] };
                idx += (base[a] + up) * self.grid.stride(a);
            }
            if w == 0.0 {
                continue;
            }
            for k in 0..m {
                out[k] += w * self.values[idx * m + k];
            }
        }
        Ok(())
    }

    /// Finite difference of component `k` along `axis` at a node: centered in
    /// the interior, one-sided at the boundary.
    pub fn diff(&self, idx: usize, k: usize, axis: usize) -> f64 {
        let g = &self.grid;
        let s = g.stride(axis);
        let i = (idx / s) % g.resolution;
        let h = g.h(axis);
        let v = |j: usize| self.values[j * self.m + k];
        if i == 0 {
            (v(idx + s) - v(idx)) / h
        } else if i == g.resolution - 1 {
            (v(idx) - v(idx - s)) / h
        } else {
            (v(idx + s) - v(idx - s)) / (2.0 * h)
        }
    }

    /// Second difference of component `k` along `axis`; the three-point
    /// stencil is shifted inward at the boundary.
    pub fn diff2(&self, idx: usize, k: usize, axis: usize) -> f64 {
        let g = &self.grid;
        let s = g.stride(axis);
        let i = (idx / s) % g.resolution;
        let h = g.h(axis);
        let c = if i == 0 {
            idx + s
        } else if i == g.resolution - 1 {
            idx - s
        } else {
            idx
        };
        let v = |j: usize| self.values[j * self.m + k];
        (v(c + s) - 2.0 * v(c) + v(c - s)) / (h * h)
    }

    /// Jacobian field: component `i * d + j` holds `d u_i / d x_j`.
    pub fn gradient(&self) -> GridFunction {
        let d = self.grid.dim();
        let mut out = GridFunction::zeros(self.grid.clone(), self.m * d);
        for idx in 0..self.grid.n_nodes() {
            for i in 0..self.m {
                for j in 0..d {
                    out.values[idx * self.m * d + i * d + j] = self.diff(idx, i, j);
                }
            }
        }
        out
    }

    /// Frobenius norm of the Hessian tensor at a node; mixed derivatives are
    /// differences of the gradient field `grad`.
    pub fn hessian_norm(&self, grad: &GridFunction, idx: usize) -> f64 {
        let d = self.grid.dim();
        let mut sum = 0.0;
        for i in 0..self.m {
            for j in 0..d {
                for l in 0..d {
                    let v = if j == l {
                        self.diff2(idx, i, j)
                    } else {
                        grad.diff(idx, i * d + l, j)
                    };
                    sum += v * v;
                }
            }
        }
        sum.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_2d() -> GridFunction {
        let grid = Grid::new(Bounds::cube(2, -1.0, 2.0), 9).unwrap();
        let mut f = GridFunction::zeros(grid.clone(), 2);
        for idx in 0..grid.n_nodes() {
            let x = grid.node(idx);
            f.values[idx * 2] = 3.0 * x[0] - 2.0 * x[1] + 1.0;
            f.values[idx * 2 + 1] = 0.5 * x[1];
        }
        f
    }

    #[test]
    fn nodes_evaluate_exactly() {
        let f = linear_2d();
        let mut out = [0.0; 2];
        for idx in 0..f.grid.n_nodes() {
            f.eval(&f.grid.node(idx), &mut out).unwrap();
            assert_eq!(out, [f.values[idx * 2], f.values[idx * 2 + 1]]);
        }
    }

    #[test]
    fn linear_fields_have_exact_derivatives() {
        let f = linear_2d();
        let g = f.gradient();
        for idx in 0..f.grid.n_nodes() {
            let j = g.at_node(idx);
            let want = [3.0, -2.0, 0.0, 0.5];
            for (a, b) in j.iter().zip(want) {
                assert!((a - b).abs() < 1e-9);
            }
            assert!(f.hessian_norm(&g, idx) < 1e-9);
        }
    }

    #[test]
    fn interpolation_is_exact_for_bilinear() {
        let f = linear_2d();
        let mut out = [0.0; 2];
        f.eval(&[0.37, 1.21], &mut out).unwrap();
        assert!((out[0] - (3.0 * 0.37 - 2.0 * 1.21 + 1.0)).abs() < 1e-12);
        assert!(f.eval(&[2.5, 0.0], &mut out).is_err());
    }

    #[test]
    fn reflection_mirrors_ghost_nodes() {
        let g = Grid::new(Bounds::cube(1, 0.0, 1.0), 5).unwrap();
        assert_eq!(g.reflect(0, 0, -1), 1);
        assert_eq!(g.reflect(4, 0, 1), 3);
        assert_eq!(g.reflect(2, 0, 1), 3);
    }
}

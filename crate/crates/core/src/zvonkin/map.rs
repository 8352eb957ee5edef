use std::path::Path;

use serde::{Deserialize, Serialize};

use super::grid::{Grid, GridFunction};
use super::ZvonkinError;
use crate::model::Bounds;

const MAX_INVERSE_STEPS: usize = 500;

/// A solved `u_lambda` with its derivative field and certificate.
#[derive(Debug, Clone, PartialEq)]
pub struct ZvonkinMap {
    pub lambda: f64,
    pub u: GridFunction,
    /// Grid differences of `u`, interpolated for `grad theta`.
    pub grad: GridFunction,
    /// `(|u|, |grad u|, |grad^2 u|)`, sup over grid nodes.
    pub norms: [f64; 3],
    /// Interior PDE residual.
    pub residual: f64,
    pub certified: bool,
    pub margin: f64,
    pub iterations: usize,
    zero: bool,
}

/// Result of the fixed-point inversion with its update history.
#[derive(Debug, Clone, PartialEq)]
pub struct InverseTrace {
    pub x: Vec<f64>,
    /// `|x_{k+1} - x_k|` for every step taken.
    pub updates: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

impl ZvonkinMap {
    pub fn from_values(u: GridFunction, lambda: f64, residual: f64, margin: f64, iterations: usize) -> ZvonkinMap {
        let grad = u.gradient();
        let m = u.m;
        let mut norms = [0.0f64; 3];
        for idx in 0..u.grid.n_nodes() {
            norms[0] = norms[0].max(norm(u.at_node(idx)));
            norms[1] = norms[1].max(norm(grad.at_node(idx)));
            norms[2] = norms[2].max(u.hessian_norm(&grad, idx));
        }
        let zero = u.values.iter().all(|&v| v == 0.0);
        let certified = norms.iter().sum::<f64>() <= 0.5;
        debug_assert_eq!(grad.m, m * u.grid.dim());
        ZvonkinMap {
            lambda,
            u,
            grad,
            norms,
            residual,
            certified,
            margin,
            iterations,
            zero,
        }
    }

    pub fn dim(&self) -> usize {
        self.u.m
    }

    pub fn bounds(&self) -> &Bounds {
        &self.u.grid.bounds
    }

    /// Region in which paths may travel.
    pub fn interior(&self) -> Bounds {
        self.bounds().shrink(self.margin)
    }

    pub fn h(&self) -> f64 {
        (0..self.dim()).map(|a| self.u.grid.h(a)).fold(0.0, f64::max)
    }

    /// `u` vanishes at every node, so `theta` is the identity.
    pub fn is_zero(&self) -> bool {
        self.zero
    }

    pub fn norm_sum(&self) -> f64 {
        self.norms.iter().sum()
    }

    pub fn certificate_line(&self) -> String {
        format!(
            "lambda={} norms=({:.6e},{:.6e},{:.6e}) sum={:.6e} certified={}",
            self.lambda,
            self.norms[0],
            self.norms[1],
            self.norms[2],
            self.norm_sum(),
            self.certified
        )
    }

    pub fn u_at(&self, x: &[f64], out: &mut [f64]) -> Result<(), ZvonkinError> {
        self.u.eval(x, out)
    }

    /// `grad u` at `x`, row-major `m x m`.
    pub fn grad_at(&self, x: &[f64], out: &mut [f64]) -> Result<(), ZvonkinError> {
        self.grad.eval(x, out)
    }

    pub fn theta_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), ZvonkinError> {
        self.u.eval(x, out)?;
        for (o, v) in out.iter_mut().zip(x) {
            *o += v;
        }
        Ok(())
    }

    /// `theta(x) = x + u(x)`.
    pub fn theta(&self, x: &[f64]) -> Result<Vec<f64>, ZvonkinError> {
        let mut out = vec![0.0; self.dim()];
        self.theta_into(x, &mut out)?;
        Ok(out)
    }

    /// Banach iteration `x <- y - u(x)` from `x = y`; `ubuf` has length `m`.
    /// Returns the number of steps.
    pub fn theta_inv_into(
        &self,
        y: &[f64],
        tol: f64,
        x: &mut [f64],
        ubuf: &mut [f64],
        mut trace: Option<&mut Vec<f64>>,
    ) -> Result<usize, ZvonkinError> {
        if !self.certified {
            return Err(ZvonkinError::NotCertified(self.norm_sum()));
        }
        x.copy_from_slice(y);
        for step in 1..=MAX_INVERSE_STEPS {
            self.u
                .eval(x, ubuf)
                .map_err(|_| ZvonkinError::InverseLeftBox(y.to_vec()))?;
            let mut upd = 0.0;
            for k in 0..x.len() {
                let next = y[k] - ubuf[k];
                upd += (next - x[k]).powi(2);
                x[k] = next;
            }
            let upd = upd.sqrt();
            if let Some(t) = trace.as_deref_mut() {
                t.push(upd);
            }
            if upd < tol {
                return Ok(step);
            }
        }
        Err(ZvonkinError::InverseStalled(y.to_vec()))
    }

    pub fn theta_inv(&self, y: &[f64], tol: f64) -> Result<InverseTrace, ZvonkinError> {
        let mut x = vec![0.0; self.dim()];
        let mut ubuf = vec![0.0; self.dim()];
        let mut updates = Vec::new();
        self.theta_inv_into(y, tol, &mut x, &mut ubuf, Some(&mut updates))?;
        if !self.bounds().contains(&x) {
            return Err(ZvonkinError::InverseLeftBox(y.to_vec()));
        }
        Ok(InverseTrace { x, updates })
    }

    /// Writes the JSON header and the CSV node table.
    pub fn write(&self, header: &Path, nodes: &Path) -> Result<(), ZvonkinError> {
        let h = MapHeader {
            format_version: 1,
            bounds: self.bounds().clone(),
            resolution: self.u.grid.resolution,
            margin: self.margin,
            lambda: self.lambda,
            norms: self.norms,
            norm_sum: self.norm_sum(),
            residual: self.residual,
            certified: self.certified,
            iterations: self.iterations,
        };
        let json = serde_json::to_string_pretty(&h).map_err(|e| ZvonkinError::Format(e.to_string()))?;
        std::fs::write(header, json + "\n")?;
        let mut w = csv::Writer::from_path(nodes).map_err(|e| ZvonkinError::Format(e.to_string()))?;
        let m = self.dim();
        let head: Vec<String> = (1..=m)
            .map(|i| format!("x{i}"))
            .chain((1..=m).map(|i| format!("u{i}")))
            .collect();
        w.write_record(&head).map_err(|e| ZvonkinError::Format(e.to_string()))?;
        for idx in 0..self.u.grid.n_nodes() {
            let row: Vec<String> = self
                .u
                .grid
                .node(idx)
                .iter()
                .chain(self.u.at_node(idx))
                .map(|v| format!("{v:?}"))
                .collect();
            w.write_record(&row).map_err(|e| ZvonkinError::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(header: &Path, nodes: &Path) -> Result<ZvonkinMap, ZvonkinError> {
        let text = std::fs::read_to_string(header)?;
        let h: MapHeader = serde_json::from_str(&text).map_err(|e| ZvonkinError::Format(e.to_string()))?;
        let grid = Grid::new(h.bounds, h.resolution)?;
        let m = grid.dim();
        let mut values = Vec::with_capacity(grid.n_nodes() * m);
        let mut r = csv::Reader::from_path(nodes).map_err(|e| ZvonkinError::Format(e.to_string()))?;
        for rec in r.records() {
            let rec = rec.map_err(|e| ZvonkinError::Format(e.to_string()))?;
            for k in 0..m {
                let v: f64 = rec
                    .get(m + k)
                    .ok_or_else(|| ZvonkinError::Format("short row".into()))?
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| ZvonkinError::Format(e.to_string()))?;
                values.push(v);
            }
        }
        if values.len() != grid.n_nodes() * m {
            return Err(ZvonkinError::Format(format!(
                "expected {} nodes, found {}",
                grid.n_nodes(),
                values.len() / m.max(1)
            )));
        }
        let u = GridFunction { grid, m, values };
        Ok(ZvonkinMap::from_values(u, h.lambda, h.residual, h.margin, h.iterations))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MapHeader {
    format_version: u32,
    bounds: Bounds,
    resolution: usize,
    margin: f64,
    lambda: f64,
    norms: [f64; 3],
    norm_sum: f64,
    residual: f64,
    certified: bool,
    iterations: usize,
}

//! Small sparse toolkit for the resolvent solves: CSR storage, Jacobi
//! preconditioned BiCGSTAB and the tridiagonal Thomas algorithm.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("zero pivot at row {0}")]
    ZeroPivot(usize),
    #[error("BiCGSTAB breakdown after {iters} iterations (residual {residual:e})")]
    Breakdown { iters: usize, residual: f64 },
    #[error("BiCGSTAB did not reach tolerance in {iters} iterations (residual {residual:e})")]
    MaxIters { iters: usize, residual: f64 },
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone)]
pub struct Csr {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Csr {
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0; n + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..n {
            indptr[i + 1] += indptr[i];
        }
        Csr {
            n,
            indptr,
            indices,
            values,
        }
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.indptr[i], self.indptr[i + 1]);
            *o = self.indices[a..b]
                .iter()
                .zip(&self.values[a..b])
                .map(|(&j, v)| v * x[j])
                .sum();
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let (a, b) = (self.indptr[i], self.indptr[i + 1]);
                self.indices[a..b]
                    .iter()
                    .zip(&self.values[a..b])
                    .find(|(&j, _)| j == i)
                    .map_or(0.0, |(_, v)| *v)
            })
            .collect()
    }

    /// Tridiagonal bands `(sub, diag, sup)` if the matrix is tridiagonal.
    pub fn tridiagonal_bands(&self) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let n = self.n;
        let (mut sub, mut diag, mut sup) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            for k in self.indptr[i]..self.indptr[i + 1] {
                let j = self.indices[k];
                let v = self.values[k];
                match j as isize - i as isize {
                    -1 => sub[i] = v,
                    0 => diag[i] = v,
                    1 => sup[i] = v,
                    _ => return None,
                }
            }
        }
        Some((sub, diag, sup))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Solves `a x = b` for a tridiagonal matrix given by its bands
/// (`sub[0]` and `sup[n-1]` are ignored).
pub fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut denom = diag[0];
    if denom == 0.0 {
        return Err(LinalgError::ZeroPivot(0));
    }
    c[0] = sup[0] / denom;
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - sub[i] * c[i - 1];
        if denom == 0.0 {
            return Err(LinalgError::ZeroPivot(i));
        }
        c[i] = if i + 1 < n { sup[i] / denom } else { 0.0 };
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        d[i] -= c[i] * d[i + 1];
    }
    Ok(d)
}

/// Jacobi-preconditioned BiCGSTAB. Stops when `|b - a x|_inf <= tol |b|_inf`.
pub fn bicgstab(a: &Csr, b: &[f64], x0: &[f64], tol: f64, max_iters: usize) -> Result<(Vec<f64>, usize), LinalgError> {
    let n = a.n;
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let precond = |v: &[f64], out: &mut [f64]| {
        for i in 0..n {
            out[i] = inv_diag[i] * v[i];
        }
    };
    let bnorm = norm_inf(b).max(1e-300);
    let mut x = x0.to_vec();
    let mut r = vec![0.0; n];
    a.mul_vec(&x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    if norm_inf(&r) <= tol * bnorm {
        return Ok((x, 0));
    }
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let (mut y, mut z, mut s, mut t) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for it in 1..=max_iters {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || omega == 0.0 {
            return Err(LinalgError::Breakdown {
                iters: it,
                residual: norm_inf(&r) / bnorm,
            });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        precond(&p, &mut y);
        a.mul_vec(&y, &mut v);
        alpha = rho / dot(&r_hat, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm_inf(&s) <= tol * bnorm {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return Ok((x, it));
        }
        precond(&s, &mut z);
        a.mul_vec(&z, &mut t);
        omega = dot(&t, &s) / dot(&t, &t);
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        if norm_inf(&r) <= tol * bnorm {
            return Ok((x, it));
        }
    }
    Err(LinalgError::MaxIters {
        iters: max_iters,
        residual: norm_inf(&r) / bnorm,
    })
}

/// Solves with Thomas when the matrix is tridiagonal, BiCGSTAB otherwise.
pub fn solve(a: &Csr, b: &[f64], x0: &[f64], tol: f64) -> Result<Vec<f64>, LinalgError> {
    match a.tridiagonal_bands() {
        Some((sub, diag, sup)) => thomas(&sub, &diag, &sup, b),
        None => bicgstab(a, b, x0, tol, 20 * a.n.max(100)).map(|(x, _)| x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace_like(n: usize, shift: f64) -> Csr {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0 + shift));
            if i > 0 {
                t.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
            }
        }
        Csr::from_triplets(n, t)
    }

    #[test]
    fn thomas_and_bicgstab_agree() {
        let a = laplace_like(50, 0.1);
        let b: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin()).collect();
        let x1 = solve(&a, &b, &vec![0.0; 50], 1e-14).unwrap();
        let (x2, _) = bicgstab(&a, &b, &vec![0.0; 50], 1e-13, 1000).unwrap();
        let mut ax = vec![0.0; 50];
        a.mul_vec(&x1, &mut ax);
        for i in 0..50 {
            assert!((ax[i] - b[i]).abs() < 1e-12);
            assert!((x1[i] - x2[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicates_are_summed() {
        let a = Csr::from_triplets(2, vec![(0, 0, 1.0), (0, 0, 2.0), (1, 1, 1.0), (1, 0, 0.5)]);
        assert_eq!(a.diagonal(), vec![3.0, 1.0]);
        let mut out = vec![0.0; 2];
        a.mul_vec(&[1.0, 1.0], &mut out);
        assert_eq!(out, vec![3.0, 1.5]);
    }
}

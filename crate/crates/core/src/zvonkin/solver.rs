use serde::{Deserialize, Serialize};

use super::grid::{Grid, GridFunction};
use super::map::ZvonkinMap;
use super::ZvonkinError;
use crate::linalg::{self, Csr};
use crate::model::{Bounds, SdeProblem};

/// Grid on which the resolvent PDE is posed. Paths must stay inside the box
/// shrunk by `margin` (a fraction of each side) on every side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bounds: Bounds,
    pub resolution: usize,
    pub margin: f64,
}

impl GridSpec {
    /// The noisy block of the problem's working box with a 20% margin.
    pub fn for_problem(problem: &SdeProblem, resolution: usize) -> GridSpec {
        let off = problem.layout.offset();
        GridSpec {
            bounds: problem.working_box.slice(off..problem.dim()),
            resolution,
            margin: 0.2,
        }
    }
}

/// `lambda I - L_h` with reflected ghost nodes (homogeneous Neumann) and the
/// four-point corner stencil for mixed derivatives.
fn assemble(grid: &Grid, a: &[f64], lambda: f64) -> Csr {
    let d = grid.dim();
    let n = grid.n_nodes();
    let mut t = Vec::with_capacity(n * (1 + 2 * d + 4 * d * d));
    for idx in 0..n {
        t.push((idx, idx, lambda));
        let a_node = &a[idx * d * d..(idx + 1) * d * d];
        for j in 0..d {
            let h = grid.h(j);
            let c = 0.5 * a_node[j * d + j] / (h * h);
            t.push((idx, idx, 2.0 * c));
            t.push((idx, grid.reflect(idx, j, 1), -c));
            t.push((idx, grid.reflect(idx, j, -1), -c));
            for l in j + 1..d {
                let c = 0.5 * (a_node[j * d + l] + a_node[l * d + j]) / (4.0 * h * grid.h(l));
                for (sj, sl, sign) in [(1, 1, 1.0), (1, -1, -1.0), (-1, 1, -1.0), (-1, -1, 1.0)] {
                    let corner = grid.reflect(grid.reflect(idx, j, sj), l, sl);
                    t.push((idx, corner, -sign * c));
                }
            }
        }
    }
    Csr::from_triplets(n, t)
}

/// `b2 + (grad u) b2` with centered differences through the reflected ghost
/// nodes, consistent with the Neumann condition.
fn picard_rhs(grid: &Grid, b: &[f64], u: &[f64], m: usize, out: &mut [Vec<f64>]) {
    let d = grid.dim();
    for idx in 0..grid.n_nodes() {
        let bn = &b[idx * m..(idx + 1) * m];
        for k in 0..m {
            let mut v = bn[k];
            for j in 0..d {
                let (p, q) = (grid.reflect(idx, j, 1), grid.reflect(idx, j, -1));
                v += bn[j] * (u[p * m + k] - u[q * m + k]) / (2.0 * grid.h(j));
            }
            out[k][idx] = v;
        }
    }
}

fn is_interior(grid: &Grid, idx: usize) -> bool {
    grid.multi_index(idx)
        .iter()
        .all(|&i| i > 0 && i < grid.resolution - 1)
}

/// Solves `L u + b2 + grad_{b2} u = lambda u` on the grid by Picard
/// iteration, one sparse solve of `(lambda - L) u_{k+1} = b2 + grad_{b2} u_k`
/// per component and step.
pub fn solve_resolvent(
    problem: &SdeProblem,
    lambda: f64,
    spec: &GridSpec,
    tol: f64,
    max_iters: usize,
) -> Result<ZvonkinMap, ZvonkinError> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(ZvonkinError::InvalidLambda(lambda));
    }
    if spec.resolution < 17 || spec.bounds.dim() > 4 {
        return Err(ZvonkinError::Resolution(spec.resolution));
    }
    let m = problem.noisy_dim();
    if spec.bounds.dim() != m {
        return Err(ZvonkinError::DimensionMismatch {
            grid: spec.bounds.dim(),
            noisy: m,
        });
    }
    let grid = Grid::new(spec.bounds.clone(), spec.resolution)?;
    let n = grid.n_nodes();

    let mut b = vec![0.0; n * m];
    let mut a = vec![0.0; n * m * m];
    let mut sigma = vec![0.0; m * m];
    for idx in 0..n {
        let x = grid.node(idx);
        problem.singular.eval(&x, &mut b[idx * m..(idx + 1) * m])?;
        problem.diffusion.eval(&x, &mut sigma)?;
        for i in 0..m {
            for j in 0..m {
                a[idx * m * m + i * m + j] = (0..m).map(|k| sigma[i * m + k] * sigma[j * m + k]).sum();
            }
        }
    }
    let mat = assemble(&grid, &a, lambda);

    let mut u = vec![0.0; n * m];
    let mut rhs = vec![vec![0.0; n]; m];
    let mut first_update = None;
    let mut last_update = f64::INFINITY;
    let mut residual = f64::INFINITY;
    for it in 1..=max_iters {
        picard_rhs(&grid, &b, &u, m, &mut rhs);
        let mut next = vec![0.0; n * m];
        for k in 0..m {
            let x0: Vec<f64> = (0..n).map(|i| u[i * m + k]).collect();
            let sol = linalg::solve(&mat, &rhs[k], &x0, 1e-14)?;
            for i in 0..n {
                next[i * m + k] = sol[i];
            }
        }
        last_update = next
            .iter()
            .zip(&u)
            .fold(0.0f64, |acc, (p, q)| acc.max((p - q).abs()));
        u = next;
        if !last_update.is_finite() || last_update > 1e6 * first_update.unwrap_or(last_update).max(1.0) {
            return Err(ZvonkinError::NonConvergence {
                lambda,
                iters: it,
                last_update,
                residual,
            });
        }
        first_update.get_or_insert(last_update);
        if last_update < tol {
            residual = interior_residual(&grid, &mat, &b, &u, m);
            if residual <= 10.0 * tol * lambda {
                return Ok(ZvonkinMap::from_values(
                    GridFunction {
                        grid,
                        m,
                        values: u,
                    },
                    lambda,
                    residual,
                    spec.margin,
                    it,
                ));
            }
        }
    }
    Err(ZvonkinError::NonConvergence {
        lambda,
        iters: max_iters,
        last_update,
        residual,
    })
}

/// `sup |L_h u + b2 + grad_{b2} u - lambda u|` over interior nodes.
pub(crate) fn interior_residual(grid: &Grid, mat: &Csr, b: &[f64], u: &[f64], m: usize) -> f64 {
    let n = grid.n_nodes();
    let mut rhs = vec![vec![0.0; n]; m];
    picard_rhs(grid, b, u, m, &mut rhs);
    let mut au = vec![0.0; n];
    let mut worst = 0.0f64;
    for k in 0..m {
        let uk: Vec<f64> = (0..n).map(|i| u[i * m + k]).collect();
        mat.mul_vec(&uk, &mut au);
        for idx in (0..n).filter(|&i| is_interior(grid, i)) {
            worst = worst.max((au[idx] - rhs[k][idx]).abs());
        }
    }
    worst
}

/// One rung of the lambda ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderStep {
    pub lambda: f64,
    /// `None` when the Picard iteration failed at this lambda.
    pub norms: Option<[f64; 3]>,
    pub sum: Option<f64>,
    pub certified: bool,
}

#[derive(Debug, Clone)]
pub struct Lambda0 {
    pub lambda0: f64,
    pub map: ZvonkinMap,
    pub trajectory: Vec<LadderStep>,
}

/// Walks `lambda_start * growth^k` and returns the first certified map.
/// Gives up past `2^20 * lambda_start`.
pub fn find_lambda0(
    problem: &SdeProblem,
    spec: &GridSpec,
    lambda_start: f64,
    growth: f64,
    tol: f64,
) -> Result<Lambda0, ZvonkinError> {
    find_lambda0_capped(problem, spec, lambda_start, growth, tol, lambda_start * 1048576.0)
}

pub fn find_lambda0_capped(
    problem: &SdeProblem,
    spec: &GridSpec,
    lambda_start: f64,
    growth: f64,
    tol: f64,
    cap: f64,
) -> Result<Lambda0, ZvonkinError> {
    if !(lambda_start > 0.0 && growth > 1.0) {
        return Err(ZvonkinError::InvalidLambda(lambda_start));
    }
    let mut trajectory = Vec::new();
    let mut lambda = lambda_start;
    while lambda <= cap * (1.0 + 1e-12) {
        match solve_resolvent(problem, lambda, spec, tol, 1000) {
            Ok(map) => {
                trajectory.push(LadderStep {
                    lambda,
                    norms: Some(map.norms),
                    sum: Some(map.norm_sum()),
                    certified: map.certified,
                });
                if map.certified {
                    return Ok(Lambda0 {
                        lambda0: lambda,
                        map,
                        trajectory,
                    });
                }
            }
            Err(ZvonkinError::NonConvergence { .. }) => trajectory.push(LadderStep {
                lambda,
                norms: None,
                sum: None,
                certified: false,
            }),
            Err(e) => return Err(e),
        }
        lambda *= growth;
    }
    Err(ZvonkinError::NoCertificate { cap, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::registry;

    fn constant_problem(c: &[f64]) -> SdeProblem {
        let n = c.len();
        let sing: Vec<String> = c.iter().map(|v| format!("{v:?}")).collect();
        let zero = vec!["0"; n].join("; ");
        let text = format!(
            "[problem]\nname = \"c\"\nlayout = \"nondegenerate\"\ndim = {n}\nhorizon = 1.0\nellipticity_k = 2.0\n\
             [drift]\nlimit = \"{zero}\"\n[singular]\nfield = \"{}\"\n[diffusion]\nsigma = {{ builtin = \"identity\" }}\n",
            sing.join("; ")
        );
        SdeProblem::from_toml_str(&text).unwrap()
    }

    #[test]
    fn zero_drift_gives_zero_map() {
        let p = registry::bundled("brownian-1d").unwrap();
        let map = solve_resolvent(&p, 1.0, &GridSpec::for_problem(&p, 65), 1e-10, 50).unwrap();
        assert!(map.is_zero());
        assert_eq!(map.norms, [0.0, 0.0, 0.0]);
        assert_eq!(map.residual, 0.0);
        assert!(map.certified);
    }

    #[test]
    fn constant_drift_solves_exactly() {
        for c in [vec![0.7], vec![0.3, -0.5]] {
            let p = constant_problem(&c);
            let res = if c.len() == 1 { 257 } else { 33 };
            let map = solve_resolvent(&p, 3.0, &GridSpec::for_problem(&p, res), 1e-12, 50).unwrap();
            for v in map.u.values.chunks(c.len()) {
                for (a, b) in v.iter().zip(&c) {
                    assert!((a - b / 3.0).abs() < 1e-8, "{a} vs {}", b / 3.0);
                }
            }
        }
    }

    #[test]
    fn nonpositive_lambda_is_rejected() {
        let p = registry::bundled("brownian-1d").unwrap();
        assert!(matches!(
            solve_resolvent(&p, 0.0, &GridSpec::for_problem(&p, 65), 1e-10, 50),
            Err(ZvonkinError::InvalidLambda(_))
        ));
    }

    #[test]
    fn ladder_stops_at_first_certificate() {
        let p = constant_problem(&[0.9]);
        let l = find_lambda0(&p, &GridSpec::for_problem(&p, 65), 1.0, 2.0, 1e-12).unwrap();
        assert_eq!(l.lambda0, 2.0);
        assert_eq!(l.trajectory.len(), 2);
        assert!((l.map.norms[0] - 0.45).abs() < 1e-10);
    }

    #[test]
    fn cap_reports_trajectory() {
        let p = constant_problem(&[0.9]);
        let err = find_lambda0_capped(&p, &GridSpec::for_problem(&p, 33), 0.1, 2.0, 1e-12, 0.5).unwrap_err();
        match err {
            ZvonkinError::NoCertificate { trajectory, .. } => assert_eq!(trajectory.len(), 3),
            e => panic!("{e}"),
        }
    }
}

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::expr::EvalError;
use super::field::{FieldSpec, Shape, VectorField};
use super::geometry::{Bounds, Region};
use super::modulus::Modulus;
use super::ModelError;

/// State layout. A nondegenerate system is the degenerate one with `d1 = 0`:
/// the noisy block is always the trailing `noisy_dim()` coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    Nondegenerate { n: usize },
    Degenerate { d1: usize, d2: usize },
}

impl Layout {
    pub fn dim(self) -> usize {
        match self {
            Layout::Nondegenerate { n } => n,
            Layout::Degenerate { d1, d2 } => d1 + d2,
        }
    }

    pub fn noisy_dim(self) -> usize {
        match self {
            Layout::Nondegenerate { n } => n,
            Layout::Degenerate { d2, .. } => d2,
        }
    }

    /// Index of the first noisy coordinate.
    pub fn offset(self) -> usize {
        self.dim() - self.noisy_dim()
    }

    pub fn is_degenerate(self) -> bool {
        matches!(self, Layout::Degenerate { .. })
    }

    pub fn state_vars(self) -> Vec<String> {
        match self {
            Layout::Nondegenerate { n } => (1..=n).map(|i| format!("x{i}")).collect(),
            Layout::Degenerate { d1, d2 } => (1..=d1)
                .map(|i| format!("x{i}"))
                .chain((1..=d2).map(|i| format!("y{i}")))
                .collect(),
        }
    }

    pub fn noisy_vars(self) -> Vec<String> {
        let all = self.state_vars();
        all[self.offset()..].to_vec()
    }
}

/// `b1^eps - b1^0 = eps^power * field`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub field: VectorField,
    pub power: f64,
}

impl Perturbation {
    pub fn scale(&self, eps: f64) -> f64 {
        if eps == 0.0 {
            0.0
        } else {
            eps.powf(self.power)
        }
    }
}

fn default_closed() -> bool {
    true
}
fn default_n_paths() -> usize {
    100_000
}
fn default_n_steps() -> usize {
    50
}
fn default_n_intervals() -> usize {
    20
}
fn default_restarts() -> usize {
    8
}
fn default_conjugacy_eps() -> f64 {
    0.5
}

/// Experiment parameters bundled with a problem for the `ldp`, `rate` and
/// `verify` verbs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Terminal event on the full state.
    pub event: Region,
    #[serde(default = "default_closed")]
    pub closed: bool,
    pub eps_ladder: Vec<f64>,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
    /// Endpoint target for rate comparisons; the event when absent.
    #[serde(default)]
    pub target: Option<Region>,
    #[serde(default = "default_n_intervals")]
    pub n_intervals: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_conjugacy_eps")]
    pub conjugacy_eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdeProblem {
    pub name: String,
    pub layout: Layout,
    pub horizon: f64,
    pub start: Vec<f64>,
    /// `b1^0` on the full state (the `(b^0, B^0)` pair when degenerate).
    pub drift_limit: VectorField,
    pub perturbation: Option<Perturbation>,
    /// `b2`, a function of the noisy block only.
    pub singular: VectorField,
    pub modulus: Modulus,
    /// Square matrix on the noisy block.
    pub diffusion: VectorField,
    pub ellipticity_k: f64,
    pub lipschitz_l: Option<f64>,
    pub working_box: Bounds,
    pub experiment: Option<ExperimentSpec>,
}

impl SdeProblem {
    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn noisy_dim(&self) -> usize {
        self.layout.noisy_dim()
    }

    /// Structural checks: shapes, positivity, modulus sanity.
    pub fn check(&self) -> Result<(), ModelError> {
        let n = self.dim();
        let m = self.noisy_dim();
        let shape = |what: &str, f: &VectorField, inn: usize, out: Shape| {
            if f.in_dim != inn || f.shape != out {
                Err(ModelError::Shape(format!(
                    "{what}: expected {inn} inputs and shape {out:?}, got {} inputs and {:?}",
                    f.in_dim, f.shape
                )))
            } else {
                Ok(())
            }
        };
        shape("drift limit", &self.drift_limit, n, Shape::Vector(n))?;
        if let Some(p) = &self.perturbation {
            shape("drift perturbation", &p.field, n, Shape::Vector(n))?;
            if !(p.power > 0.0) {
                return Err(ModelError::Invalid("perturbation power must be positive".into()));
            }
        }
        shape("singular drift", &self.singular, m, Shape::Vector(m))?;
        shape("diffusion", &self.diffusion, m, Shape::Matrix(m))?;
        if self.start.len() != n || self.working_box.dim() != n {
            return Err(ModelError::Shape("start and box must match the state dimension".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(ModelError::Invalid("horizon must be positive".into()));
        }
        if !(self.ellipticity_k > 1.0) {
            return Err(ModelError::Invalid("ellipticity constant K must exceed 1".into()));
        }
        if !self.working_box.contains(&self.start) {
            return Err(ModelError::Invalid("start point lies outside the working box".into()));
        }
        self.modulus.validate()?;
        if let Some(e) = &self.experiment {
            if e.event.dim() != n || e.target.as_ref().is_some_and(|t| t.dim() != n) {
                return Err(ModelError::Shape("experiment regions must live in the state space".into()));
            }
            if e.eps_ladder.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
                return Err(ModelError::Invalid("eps ladder values must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }

    /// Same problem with `b2` replaced by zero.
    pub fn without_singular(&self) -> SdeProblem {
        let mut p = self.clone();
        let m = self.noisy_dim();
        let mut zero = VectorField::zero(m, Shape::Vector(m));
        zero.var_names = self.layout.noisy_vars();
        p.singular = zero;
        p
    }

    /// `b1^eps(z)`; `tmp` needs length `dim()`.
    pub fn eval_b1(&self, eps: f64, z: &[f64], out: &mut [f64], tmp: &mut [f64]) -> Result<(), EvalError> {
        self.drift_limit.eval(z, out)?;
        if let Some(p) = &self.perturbation {
            let s = p.scale(eps);
            if s != 0.0 {
                p.field.eval(z, tmp)?;
                for (o, t) in out.iter_mut().zip(tmp.iter()) {
                    *o += s * t;
                }
            }
        }
        Ok(())
    }

    /// Full drift `b1^eps + eps b2` (the singular term on the noisy block).
    pub fn eval_drift(&self, eps: f64, z: &[f64], out: &mut [f64], tmp: &mut [f64]) -> Result<(), EvalError> {
        self.eval_b1(eps, z, out, tmp)?;
        if eps != 0.0 && !self.singular.is_zero() {
            let off = self.layout.offset();
            let m = self.noisy_dim();
            self.singular.eval(&z[off..], &mut tmp[..m])?;
            for (o, t) in out[off..].iter_mut().zip(&tmp[..m]) {
                *o += eps * t;
            }
        }
        Ok(())
    }

    pub fn eval_sigma(&self, z: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        self.diffusion.eval(&z[self.layout.offset()..], out)
    }

    pub fn from_toml_str(text: &str) -> Result<SdeProblem, ModelError> {
        let file: ProblemFile =
            toml::from_str(text).map_err(|e| ModelError::Format(e.to_string()))?;
        file.into_problem()
    }

    pub fn load(path: &Path) -> Result<SdeProblem, ModelError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        let p = &self.problem_section();
        let file = ProblemFile {
            problem: p.clone(),
            drift: DriftSection {
                limit: self.drift_limit.to_spec(),
                perturbation: self.perturbation.as_ref().map(|p| p.field.to_spec()),
                perturbation_power: self.perturbation.as_ref().map(|p| p.power),
            },
            singular: Some(SingularSection {
                field: self.singular.to_spec(),
            }),
            diffusion: DiffusionSection {
                sigma: self.diffusion.to_spec(),
            },
            modulus: Some(self.modulus.clone()),
            experiment: self.experiment.clone(),
        };
        toml::to_string(&file).expect("problem description serializes")
    }

    fn problem_section(&self) -> ProblemSection {
        let (layout, dim, d1, d2) = match self.layout {
            Layout::Nondegenerate { n } => ("nondegenerate", Some(n), None, None),
            Layout::Degenerate { d1, d2 } => ("degenerate", None, Some(d1), Some(d2)),
        };
        ProblemSection {
            name: self.name.clone(),
            layout: layout.into(),
            dim,
            d1,
            d2,
            horizon: self.horizon,
            start: Some(self.start.clone()),
            ellipticity_k: self.ellipticity_k,
            lipschitz_l: self.lipschitz_l,
            box_lo: Some(self.working_box.lo.clone()),
            box_hi: Some(self.working_box.hi.clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemSection {
    name: String,
    layout: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d1: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d2: Option<usize>,
    horizon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    start: Option<Vec<f64>>,
    ellipticity_k: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lipschitz_l: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    box_lo: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    box_hi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DriftSection {
    limit: FieldSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    perturbation: Option<FieldSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    perturbation_power: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SingularSection {
    field: FieldSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiffusionSection {
    sigma: FieldSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProblemFile {
    problem: ProblemSection,
    drift: DriftSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    singular: Option<SingularSection>,
    diffusion: DiffusionSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    modulus: Option<Modulus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    experiment: Option<ExperimentSpec>,
}

impl ProblemFile {
    fn into_problem(self) -> Result<SdeProblem, ModelError> {
        let p = self.problem;
        let layout = match (p.layout.as_str(), p.dim, p.d1, p.d2) {
            ("nondegenerate", Some(n), None, None) if n > 0 => Layout::Nondegenerate { n },
            ("degenerate", None, Some(d1), Some(d2)) if d1 > 0 && d2 > 0 => {
                Layout::Degenerate { d1, d2 }
            }
            _ => {
                return Err(ModelError::Format(
                    "[problem] needs layout = \"nondegenerate\" with dim, or \"degenerate\" with d1 and d2"
                        .into(),
                ))
            }
        };
        let n = layout.dim();
        let m = layout.noisy_dim();
        let state_vars = layout.state_vars();
        let noisy_vars = layout.noisy_vars();

        let mut modulus = self.modulus.unwrap_or(Modulus::Lipschitz { l: 0.0 });
        modulus.compile()?;

        let drift_limit = VectorField::from_spec(&self.drift.limit, state_vars.clone(), Shape::Vector(n), None)?;
        let perturbation = match self.drift.perturbation {
            Some(spec) => Some(Perturbation {
                field: VectorField::from_spec(&spec, state_vars, Shape::Vector(n), None)?,
                power: self.drift.perturbation_power.unwrap_or(1.0),
            }),
            None => None,
        };
        let mut singular = match self.singular {
            Some(s) => VectorField::from_spec(&s.field, noisy_vars.clone(), Shape::Vector(m), Some(&modulus))?,
            None => {
                let mut z = VectorField::zero(m, Shape::Vector(m));
                z.var_names = noisy_vars.clone();
                z
            }
        };
        singular.declared_modulus = Some(modulus.clone());
        let diffusion = VectorField::from_spec(&self.diffusion.sigma, noisy_vars, Shape::Matrix(m), None)?;

        let working_box = match (p.box_lo, p.box_hi) {
            (Some(lo), Some(hi)) => Bounds::new(lo, hi)?,
            (None, None) => Bounds::cube(n, -5.0, 5.0),
            _ => return Err(ModelError::Format("box_lo and box_hi must be given together".into())),
        };
        let problem = SdeProblem {
            name: p.name,
            layout,
            horizon: p.horizon,
            start: p.start.unwrap_or_else(|| vec![0.0; n]),
            drift_limit,
            perturbation,
            singular,
            modulus,
            diffusion,
            ellipticity_k: p.ellipticity_k,
            lipschitz_l: p.lipschitz_l,
            working_box,
            experiment: self.experiment,
        };
        problem.check()?;
        Ok(problem)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const OU: &str = r#"
[problem]
name = "ou"
layout = "nondegenerate"
dim = 1
horizon = 1.0
ellipticity_k = 2.0

[drift]
limit = "-x1"
perturbation = "tanh(x1)"

[diffusion]
sigma = "1"
"#;

    #[test]
    fn loads_minimal_file() {
        let p = SdeProblem::from_toml_str(OU).unwrap();
        assert_eq!(p.layout, Layout::Nondegenerate { n: 1 });
        assert!(p.singular.is_zero());
        let mut out = [0.0];
        let mut tmp = [0.0];
        p.eval_drift(0.5, &[1.0], &mut out, &mut tmp).unwrap();
        assert!((out[0] - (-1.0 + 0.5 * 1f64.tanh())).abs() < 1e-15);
    }

    #[test]
    fn round_trips_through_toml() {
        let p = SdeProblem::from_toml_str(OU).unwrap();
        let q = SdeProblem::from_toml_str(&p.to_toml()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_shapes() {
        let bad = OU.replace("horizon", "horizn");
        assert!(matches!(SdeProblem::from_toml_str(&bad), Err(ModelError::Format(_))));
        let bad = OU.replace("sigma = \"1\"", "sigma = \"1; 0\"");
        assert!(matches!(SdeProblem::from_toml_str(&bad), Err(ModelError::Shape(_))));
    }

    #[test]
    fn degenerate_variables() {
        let text = r#"
[problem]
name = "h"
layout = "degenerate"
d1 = 1
d2 = 1
horizon = 1.0
ellipticity_k = 2.0

[drift]
limit = "y1; -0.5*tanh(x1 + y1)"

[singular]
field = "0.5*tanh(y1)"

[modulus]
kind = "lipschitz"
l = 0.5

[diffusion]
sigma = "1 + 0.1*tanh(y1)"
"#;
        let p = SdeProblem::from_toml_str(text).unwrap();
        let mut out = [0.0; 2];
        let mut tmp = [0.0; 2];
        p.eval_drift(0.5, &[1.0, 2.0], &mut out, &mut tmp).unwrap();
        assert_eq!(out[0], 2.0);
        let want = -0.5 * 3f64.tanh() + 0.25 * 2f64.tanh();
        assert!((out[1] - want).abs() < 1e-15);
    }
}

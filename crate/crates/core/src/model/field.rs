use serde::{Deserialize, Serialize};

use super::expr::{EvalError, Expr};
use super::modulus::Modulus;
use super::ModelError;

/// Output layout of a field: a vector of length `n` or an `n x n` matrix
/// stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Vector(usize),
    Matrix(usize),
}

impl Shape {
    pub fn len(self) -> usize {
        match self {
            Shape::Vector(n) => n,
            Shape::Matrix(n) => n * n,
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Shape::Vector(n) | Shape::Matrix(n) => n,
        }
    }
}

/// Serialized form of a field body: an expression list separated by `;`, or a
/// built-in with numeric parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FieldSpec {
    Expression(String),
    Builtin {
        builtin: String,
        #[serde(default)]
        params: Vec<f64>,
    },
}

/// Odd profile `x -> e * sign(e.x) * min(psi(|e.x|), cap)` whose increments are
/// bounded by a given modulus `phi`.
///
/// `psi(t) = phi(2t)/2` while `phi` is concave on `[0, 2t]`, continued by the
/// tangent line past the inflection point. The pieces give
/// `|b(x) - b(y)| <= phi(|x - y|)` for both same-sign and opposite-sign pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct OddModulusProfile {
    pub modulus: Modulus,
    pub cap: f64,
    pub direction: Vec<f64>,
    knee: f64,
    knee_value: f64,
    slope: f64,
}

impl OddModulusProfile {
    pub fn new(modulus: Modulus, cap: f64, direction: Vec<f64>) -> Result<Self, ModelError> {
        let s_star = modulus.concavity_limit().ok_or_else(|| {
            ModelError::Invalid("odd_modulus needs a closed-form modulus family".into())
        })?;
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) {
            return Err(ModelError::Invalid("odd_modulus direction must be nonzero".into()));
        }
        if !(cap > 0.0) {
            return Err(ModelError::Invalid("odd_modulus cap must be positive".into()));
        }
        let direction: Vec<f64> = direction.iter().map(|v| v / norm).collect();
        let (knee, knee_value, slope) = if s_star.is_finite() {
            let h = 1e-7 * s_star;
            let slope = (modulus.eval(s_star + h)? - modulus.eval(s_star - h)?) / (2.0 * h);
            (0.5 * s_star, 0.5 * modulus.eval(s_star)?, slope)
        } else {
            (f64::INFINITY, 0.0, 0.0)
        };
        Ok(Self {
            modulus,
            cap,
            direction,
            knee,
            knee_value,
            slope,
        })
    }

    fn psi(&self, t: f64) -> f64 {
        let raw = if t <= self.knee {
            // closed-form families cannot fail on t >= 0
            0.5 * self.modulus.eval(2.0 * t).unwrap_or(f64::NAN)
        } else {
            self.knee_value + self.slope * (t - self.knee)
        };
        raw.min(self.cap)
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let s: f64 = self.direction.iter().zip(x).map(|(e, v)| e * v).sum();
        let v = s.signum() * self.psi(s.abs());
        let v = if s == 0.0 { 0.0 } else { v };
        for (o, e) in out.iter_mut().zip(&self.direction) {
            *o = e * v;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Builtin {
    Zero,
    Identity,
    Constant(Vec<f64>),
    /// Row-major `out x in` matrix applied to the input.
    Linear(Vec<f64>),
    /// `c * I` (matrix shape only).
    ScaledIdentity(f64),
    OddModulus(OddModulusProfile),
}

#[derive(Debug, Clone, PartialEq)]
pub enum FieldBody {
    Builtin(Builtin),
    Expr(Vec<Expr>),
}

/// An evaluable map `R^in -> R^out` (or into square matrices).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub in_dim: usize,
    pub shape: Shape,
    pub body: FieldBody,
    pub var_names: Vec<String>,
    pub declared_modulus: Option<Modulus>,
    pub declared_bound: Option<f64>,
}

pub fn default_vars(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("x{i}")).collect()
}

/// Parses `;`-separated expressions in the variables `x1..x{in_dim}`.
pub fn parse_field(text: &str, in_dim: usize, out_dim: usize) -> Result<VectorField, ModelError> {
    VectorField::parse(text, default_vars(in_dim), Shape::Vector(out_dim))
}

impl VectorField {
    pub fn parse(text: &str, vars: Vec<String>, shape: Shape) -> Result<VectorField, ModelError> {
        let names: Vec<&str> = vars.iter().map(String::as_str).collect();
        let parts: Vec<&str> = text.split(';').collect();
        if parts.len() != shape.len() {
            return Err(ModelError::Shape(format!(
                "expected {} expression(s), found {} in `{text}`",
                shape.len(),
                parts.len()
            )));
        }
        let mut exprs = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for part in parts {
            let e = Expr::parse(part, &names).map_err(|mut e| {
                e.pos += offset;
                e
            })?;
            exprs.push(e);
            offset += part.len() + 1;
        }
        Ok(VectorField {
            in_dim: vars.len(),
            shape,
            body: FieldBody::Expr(exprs),
            var_names: vars,
            declared_modulus: None,
            declared_bound: None,
        })
    }

    fn builtin(in_dim: usize, shape: Shape, b: Builtin) -> VectorField {
        VectorField {
            in_dim,
            shape,
            body: FieldBody::Builtin(b),
            var_names: default_vars(in_dim),
            declared_modulus: None,
            declared_bound: None,
        }
    }

    pub fn zero(in_dim: usize, shape: Shape) -> VectorField {
        Self::builtin(in_dim, shape, Builtin::Zero)
    }

    pub fn identity(n: usize) -> VectorField {
        Self::builtin(n, Shape::Vector(n), Builtin::Identity)
    }

    pub fn constant(in_dim: usize, c: Vec<f64>) -> VectorField {
        let shape = Shape::Vector(c.len());
        Self::builtin(in_dim, shape, Builtin::Constant(c))
    }

    pub fn linear(in_dim: usize, out_dim: usize, matrix: Vec<f64>) -> Result<VectorField, ModelError> {
        if matrix.len() != in_dim * out_dim {
            return Err(ModelError::Shape(format!(
                "linear field needs {} entries, got {}",
                in_dim * out_dim,
                matrix.len()
            )));
        }
        Ok(Self::builtin(in_dim, Shape::Vector(out_dim), Builtin::Linear(matrix)))
    }

    pub fn scaled_identity(n: usize, c: f64) -> VectorField {
        Self::builtin(n, Shape::Matrix(n), Builtin::ScaledIdentity(c))
    }

    pub fn odd_modulus(n: usize, profile: OddModulusProfile) -> Result<VectorField, ModelError> {
        if profile.direction.len() != n {
            return Err(ModelError::Shape("odd_modulus direction length".into()));
        }
        let cap = profile.cap;
        let modulus = profile.modulus.clone();
        let mut f = Self::builtin(n, Shape::Vector(n), Builtin::OddModulus(profile));
        f.declared_modulus = Some(modulus);
        f.declared_bound = Some(cap);
        Ok(f)
    }

    /// Builds a field from its serialized description. `modulus` feeds the
    /// `odd_modulus` built-in.
    pub fn from_spec(
        spec: &FieldSpec,
        vars: Vec<String>,
        shape: Shape,
        modulus: Option<&Modulus>,
    ) -> Result<VectorField, ModelError> {
        let n = vars.len();
        let mut field = match spec {
            FieldSpec::Expression(text) => return VectorField::parse(text, vars, shape),
            FieldSpec::Builtin { builtin, params } => match (builtin.as_str(), shape) {
                ("zero", _) => Self::zero(n, shape),
                ("identity", Shape::Vector(m)) if m == n => Self::identity(n),
                ("identity", Shape::Matrix(_)) => Self::scaled_identity(n, 1.0),
                ("constant", Shape::Vector(m)) if params.len() == m => {
                    Self::constant(n, params.clone())
                }
                ("linear", Shape::Vector(m)) => Self::linear(n, m, params.clone())?,
                ("scaled_identity", Shape::Matrix(m)) if m == n && params.len() == 1 => {
                    Self::scaled_identity(n, params[0])
                }
                ("odd_modulus", Shape::Vector(m)) if m == n => {
                    let modulus = modulus.ok_or_else(|| {
                        ModelError::Invalid("odd_modulus requires a [modulus] section".into())
                    })?;
                    let cap = params.first().copied().unwrap_or(1.0);
                    let direction = if params.len() > 1 {
                        params[1..].to_vec()
                    } else {
                        let mut e = vec![0.0; n];
                        e[0] = 1.0;
                        e
                    };
                    Self::odd_modulus(n, OddModulusProfile::new(modulus.clone(), cap, direction)?)?
                }
                (other, _) => {
                    return Err(ModelError::Invalid(format!(
                        "built-in `{other}` with {} params does not fit shape {shape:?} on {n} inputs",
                        params.len()
                    )))
                }
            },
        };
        field.var_names = vars;
        Ok(field)
    }

    pub fn to_spec(&self) -> FieldSpec {
        match &self.body {
            FieldBody::Expr(_) => FieldSpec::Expression(self.print()),
            FieldBody::Builtin(b) => {
                let (name, params) = match b {
                    Builtin::Zero => ("zero", vec![]),
                    Builtin::Identity => ("identity", vec![]),
                    Builtin::Constant(c) => ("constant", c.clone()),
                    Builtin::Linear(a) => ("linear", a.clone()),
                    Builtin::ScaledIdentity(c) => ("scaled_identity", vec![*c]),
                    Builtin::OddModulus(p) => {
                        let mut v = vec![p.cap];
                        v.extend_from_slice(&p.direction);
                        ("odd_modulus", v)
                    }
                };
                FieldSpec::Builtin {
                    builtin: name.into(),
                    params,
                }
            }
        }
    }

    /// Text form of an expression field; parses back to an identical field.
    pub fn print(&self) -> String {
        match &self.body {
            FieldBody::Expr(exprs) => {
                let names: Vec<&str> = self.var_names.iter().map(String::as_str).collect();
                exprs
                    .iter()
                    .map(|e| e.display(&names).to_string())
                    .collect::<Vec<_>>()
                    .join("; ")
            }
            FieldBody::Builtin(_) => format!("{:?}", self.to_spec()),
        }
    }

    pub fn out_len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.body, FieldBody::Builtin(Builtin::Zero))
    }

    /// Evaluates into `out` (length [`Self::out_len`]).
    pub fn eval(&self, x: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(out.len(), self.out_len());
        match &self.body {
            FieldBody::Expr(exprs) => {
                for (o, e) in out.iter_mut().zip(exprs) {
                    *o = e.eval(x)?;
                }
            }
            FieldBody::Builtin(b) => match b {
                Builtin::Zero => out.fill(0.0),
                Builtin::Identity => out.copy_from_slice(x),
                Builtin::Constant(c) => out.copy_from_slice(c),
                Builtin::Linear(a) => {
                    let n = self.in_dim;
                    for (i, o) in out.iter_mut().enumerate() {
                        *o = a[i * n..(i + 1) * n].iter().zip(x).map(|(a, x)| a * x).sum();
                    }
                }
                Builtin::ScaledIdentity(c) => {
                    let n = self.shape.dim();
                    out.fill(0.0);
                    for i in 0..n {
                        out[i * n + i] = *c;
                    }
                }
                Builtin::OddModulus(p) => p.eval(x, out),
            },
        }
        if out.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(EvalError::NonFinite)
        }
    }

    pub fn eval_vec(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        let mut out = vec![0.0; self.out_len()];
        self.eval(x, &mut out)?;
        Ok(out)
    }
}

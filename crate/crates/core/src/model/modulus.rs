//! Moduli of continuity and the Dini integral test.

use serde::{Deserialize, Serialize};

use super::expr::Expr;
use super::ModelError;

/// A modulus of continuity `phi: [0, inf) -> [0, inf)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Modulus {
    /// `phi(t) = log(1 + 1/t)^(-beta)`, Dini iff `beta > 1`.
    DiniLog { beta: f64 },
    /// `phi(t) = t^alpha`, `alpha` in (0, 1).
    Holder { alpha: f64 },
    /// `phi(t) = l * t`.
    Lipschitz { l: f64 },
    /// A scalar expression in the variable `t`.
    Expression {
        expr: String,
        #[serde(skip)]
        parsed: Option<Expr>,
    },
}

impl Modulus {
    pub fn expression(text: &str) -> Result<Modulus, ModelError> {
        let parsed = Expr::parse(text, &["t"])?;
        Ok(Modulus::Expression {
            expr: text.to_string(),
            parsed: Some(parsed),
        })
    }

    /// Parses the expression body if it was deserialized from text.
    pub fn compile(&mut self) -> Result<(), ModelError> {
        if let Modulus::Expression { expr, parsed } = self {
            if parsed.is_none() {
                *parsed = Some(Expr::parse(expr, &["t"])?);
            }
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<f64, ModelError> {
        let v = match self {
            Modulus::DiniLog { beta } => {
                if t == 0.0 {
                    0.0
                } else {
                    (1.0 + 1.0 / t).ln().powf(-beta)
                }
            }
            Modulus::Holder { alpha } => t.powf(*alpha),
            Modulus::Lipschitz { l } => l * t,
            Modulus::Expression { parsed, expr } => {
                let e = parsed
                    .as_ref()
                    .ok_or_else(|| ModelError::Invalid(format!("modulus `{expr}` not compiled")))?;
                e.eval(&[t])?
            }
        };
        if !v.is_finite() || v < 0.0 {
            return Err(ModelError::BadModulus { t, value: v });
        }
        Ok(v)
    }

    /// Checks nonnegativity and monotonicity on a probe grid of [0, 1].
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Modulus::DiniLog { beta } if !(*beta > 0.0) => {
                return Err(ModelError::Invalid(format!("dini_log beta must be > 0, got {beta}")))
            }
            Modulus::Holder { alpha } if !(*alpha > 0.0 && *alpha < 1.0) => {
                return Err(ModelError::Invalid(format!("holder alpha must be in (0,1), got {alpha}")))
            }
            Modulus::Lipschitz { l } if !(*l >= 0.0) => {
                return Err(ModelError::Invalid(format!("lipschitz constant must be >= 0, got {l}")))
            }
            _ => {}
        }
        let mut prev = self.eval(0.0)?;
        for k in 1..=1000 {
            let t = k as f64 / 1000.0;
            let v = self.eval(t)?;
            if v < prev - 1e-12 * prev.abs().max(1.0) {
                return Err(ModelError::Invalid(format!(
                    "modulus decreases near t = {t}: {prev} -> {v}"
                )));
            }
            prev = v;
        }
        Ok(())
    }

    /// Largest `s*` such that `phi` is concave on `[0, s*]`, or infinity.
    ///
    /// Only defined for the closed-form families.
    pub fn concavity_limit(&self) -> Option<f64> {
        match self {
            Modulus::Holder { .. } | Modulus::Lipschitz { .. } => Some(f64::INFINITY),
            Modulus::DiniLog { beta } => {
                // phi'' <= 0  <=>  (2s + 1) log(1 + 1/s) >= beta + 1; the left side
                // decreases from +inf to 2.
                let target = beta + 1.0;
                if target <= 2.0 {
                    return Some(f64::INFINITY);
                }
                let g = |s: f64| (2.0 * s + 1.0) * (1.0 + 1.0 / s).ln() - target;
                let (mut lo, mut hi) = (1e-300_f64, 1.0_f64);
                while g(hi) > 0.0 {
                    hi *= 2.0;
                }
                for _ in 0..400 {
                    let mid = if hi / lo > 4.0 {
                        (lo * hi).sqrt()
                    } else {
                        0.5 * (lo + hi)
                    };
                    if g(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Some(lo)
            }
            Modulus::Expression { .. } => None,
        }
    }

    fn derivative(&self, t: f64) -> Result<f64, ModelError> {
        let h = 1e-6 * t.max(1e-12);
        Ok((self.eval(t + h)? - self.eval(t - h)?) / (2.0 * h))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum DiniVerdict {
    Finite { value: f64 },
    Divergent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiniReport {
    pub verdict: DiniVerdict,
    /// `(cutoff, integral over [cutoff, 1], tail-extrapolated value)`.
    pub trace: Vec<(f64, f64, f64)>,
}

/// Log-spaced cutoffs `1e-2, 1e-3, ..., 1e-12`.
pub fn default_cutoffs() -> Vec<f64> {
    (2..=12).map(|k| 10f64.powi(-k)).collect()
}

/// Decides whether `int_0^1 phi(s)/s ds` is finite.
///
/// The integral over `[c, 1]` is computed by adaptive Simpson in
/// `L = log(1/s)`, where it becomes `int_0^{log(1/c)} phi(e^{-L}) dL`. The part
/// below each cutoff is extrapolated from the local decay exponent
/// `p = -d log g / d log L` of `g(L) = phi(e^{-L})`: a tail behaving like
/// `L^{-p}` contributes `g L / (p - 1)` when `p > 1` and diverges otherwise.
/// The verdict is finite when the last three extrapolated values are finite
/// and agree to a relative `1e-3`.
pub fn dini_classify(m: &Modulus, cutoffs: &[f64]) -> Result<DiniReport, ModelError> {
    if cutoffs.len() < 3 {
        return Err(ModelError::Invalid("need at least three cutoffs".into()));
    }
    if cutoffs
        .windows(2)
        .any(|w| !(w[1] < w[0]) || w[0] >= 1.0 || w[1] <= 0.0)
    {
        return Err(ModelError::Invalid(
            "cutoffs must decrease strictly inside (0, 1)".into(),
        ));
    }
    for k in 0..=100 {
        m.eval(k as f64 / 100.0)?;
    }

    let g = |l: f64| m.eval((-l).exp());
    let mut trace = Vec::with_capacity(cutoffs.len());
    let mut acc = 0.0;
    let mut l_prev = 0.0;
    for &c in cutoffs {
        let l = -c.ln();
        acc += adaptive_simpson(&g, l_prev, l, 1e-12)?;
        l_prev = l;

        let gl = g(l)?;
        let tail = if gl == 0.0 {
            0.0
        } else {
            // d log g / d log L with phi'(s) s = d phi / d log s.
            let s = c;
            let dphi_dlogs = m.derivative(s)? * s;
            let p = l * dphi_dlogs / gl;
            if p > 1.0 {
                gl * l / (p - 1.0)
            } else {
                f64::INFINITY
            }
        };
        trace.push((c, acc, acc + tail));
    }

    let last: Vec<f64> = trace.iter().rev().take(3).map(|t| t.2).collect();
    let converged = last.iter().all(|v| v.is_finite())
        && last
            .windows(2)
            .all(|w| (w[0] - w[1]).abs() <= 1e-3 * w[0].abs().max(f64::MIN_POSITIVE));
    let verdict = if converged {
        DiniVerdict::Finite { value: last[0] }
    } else {
        DiniVerdict::Divergent
    };
    Ok(DiniReport { verdict, trace })
}

fn adaptive_simpson<F>(f: &F, a: f64, b: f64, tol: f64) -> Result<f64, ModelError>
where
    F: Fn(f64) -> Result<f64, ModelError>,
{
    fn rec<F>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> Result<f64, ModelError>
    where
        F: Fn(f64) -> Result<f64, ModelError>,
    {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm)?;
        let frm = f(rm)?;
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return Ok(left + right + delta / 15.0);
        }
        Ok(rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?
            + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?)
    }
    let fa = f(a)?;
    let fb = f(b)?;
    let fm = f(0.5 * (a + b))?;
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// Finite probe of slow variation at zero: `phi(delta t) / phi(t)` for
/// `delta` in {0.5, 2} at `t = 10^-k`. Advisory only; the property is a limit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlowVariationProbe {
    /// `(t, phi(t/2)/phi(t), phi(2t)/phi(t))`
    pub ratios: Vec<(f64, f64, f64)>,
    /// Deviation from 1 of the two ratios at the smallest probed `t`.
    pub final_deviation: f64,
    /// Whether the deviation shrinks along the probe.
    pub trending_to_one: bool,
}

pub fn probe_slow_variation(m: &Modulus) -> Result<SlowVariationProbe, ModelError> {
    let mut ratios = Vec::new();
    for k in 2..=12 {
        let t = 10f64.powi(-k);
        let base = m.eval(t)?;
        if base == 0.0 {
            continue;
        }
        ratios.push((t, m.eval(0.5 * t)? / base, m.eval(2.0 * t)? / base));
    }
    let dev = |r: &(f64, f64, f64)| (r.1 - 1.0).abs().max((r.2 - 1.0).abs());
    let final_deviation = ratios.last().map_or(f64::INFINITY, dev);
    let first = ratios.first().map_or(f64::INFINITY, dev);
    Ok(SlowVariationProbe {
        trending_to_one: final_deviation < first && final_deviation < 0.2,
        ratios,
        final_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_value(m: &Modulus) -> Option<f64> {
        match dini_classify(m, &default_cutoffs()).unwrap().verdict {
            DiniVerdict::Finite { value } => Some(value),
            DiniVerdict::Divergent => None,
        }
    }

    #[test]
    fn holder_integral_matches_closed_form() {
        for alpha in [0.25, 0.5, 0.75] {
            let v = finite_value(&Modulus::Holder { alpha }).expect("finite");
            let exact = 1.0 / alpha;
            assert!((v - exact).abs() <= 1e-3 * exact, "alpha {alpha}: {v}");
        }
        let v = finite_value(&Modulus::Holder { alpha: 0.5 }).unwrap();
        assert!((v - 2.0).abs() < 2e-3);
    }

    #[test]
    fn dini_log_threshold_at_beta_one() {
        for beta in [1.5, 2.0, 3.0] {
            assert!(finite_value(&Modulus::DiniLog { beta }).is_some(), "beta {beta}");
        }
        for beta in [0.5, 1.0] {
            assert!(finite_value(&Modulus::DiniLog { beta }).is_none(), "beta {beta}");
        }
    }

    #[test]
    fn divergent_truncations_keep_growing() {
        // The truncated integrals for beta = 1 grow like log log(1/cutoff).
        let r = dini_classify(&Modulus::DiniLog { beta: 1.0 }, &default_cutoffs()).unwrap();
        assert!(r.trace.windows(2).all(|w| w[1].1 > w[0].1));
        let (c0, v0, _) = r.trace[0];
        let (c1, v1, _) = *r.trace.last().unwrap();
        let predicted = ((-c1.ln()).ln() - (-c0.ln()).ln()).abs();
        assert!(((v1 - v0) - predicted).abs() < 0.05 * predicted);
    }

    #[test]
    fn expression_modulus() {
        let m = Modulus::expression("t ^ 0.5").unwrap();
        let v = finite_value(&m).unwrap();
        assert!((v - 2.0).abs() < 2e-3);
        let bad = Modulus::expression("t - 0.5").unwrap();
        assert!(matches!(
            dini_classify(&bad, &default_cutoffs()),
            Err(ModelError::BadModulus { .. })
        ));
    }

    #[test]
    fn validation_rejects_bad_parameters() {
        assert!(Modulus::Holder { alpha: 1.5 }.validate().is_err());
        assert!(Modulus::DiniLog { beta: 0.0 }.validate().is_err());
        assert!(Modulus::expression("1 - t").unwrap().validate().is_err());
        assert!(Modulus::DiniLog { beta: 2.0 }.validate().is_ok());
    }

    #[test]
    fn concavity_limit_of_dini_log() {
        let s = Modulus::DiniLog { beta: 2.0 }.concavity_limit().unwrap();
        assert!(((2.0 * s + 1.0) * (1.0 + 1.0 / s).ln() - 3.0).abs() < 1e-9);
        let m = Modulus::DiniLog { beta: 2.0 };
        let h = 1e-4 * s;
        let second = |t: f64| m.eval(t + h).unwrap() - 2.0 * m.eval(t).unwrap() + m.eval(t - h).unwrap();
        assert!(second(0.5 * s) < 0.0);
        assert!(second(2.0 * s) > 0.0);
        assert_eq!(Modulus::DiniLog { beta: 0.5 }.concavity_limit(), Some(f64::INFINITY));
    }

    #[test]
    fn slow_variation_separates_log_from_power() {
        assert!(probe_slow_variation(&Modulus::DiniLog { beta: 2.0 }).unwrap().trending_to_one);
        assert!(!probe_slow_variation(&Modulus::Holder { alpha: 0.5 }).unwrap().trending_to_one);
    }
}

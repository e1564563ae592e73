//! The random coefficients potential outcome model.
//!
//! `Y(d, d̄) = f(d̄)' [(1 - d) θ + d ψ]` with a known basis `f` of bounded
//! functions on `[0, 1]`. Direct and indirect effects are linear functionals
//! of the mean coefficients of some sub-population.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{Error, Result};

type BasisFn = fn(f64) -> f64;

/// A finite basis `f = (f_1, ..., f_K)` on `[0, 1]`.
#[derive(Clone)]
pub struct BasisSpec {
    name: String,
    funcs: Vec<BasisFn>,
}

impl fmt::Debug for BasisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BasisSpec")
            .field("name", &self.name)
            .field("k", &self.funcs.len())
            .finish()
    }
}

impl PartialEq for BasisSpec {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.funcs.len() == other.funcs.len()
    }
}

const BOUND_CHECK_POINTS: usize = 1001;

impl BasisSpec {
    /// Builds a basis, rejecting functions that are not finite on a
    /// 1001-point grid of `[0, 1]`.
    pub fn new(name: impl Into<String>, funcs: Vec<BasisFn>) -> Result<Self> {
        if funcs.is_empty() {
            return Err(Error::InvalidArgument("basis needs at least one function".into()));
        }
        for (k, f) in funcs.iter().enumerate() {
            for i in 0..BOUND_CHECK_POINTS {
                let x = i as f64 / (BOUND_CHECK_POINTS - 1) as f64;
                if !f(x).is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "basis function {k} is unbounded at x = {x}"
                    )));
                }
            }
        }
        Ok(BasisSpec {
            name: name.into(),
            funcs,
        })
    }

    /// `f(x) = (1, x)`.
    pub fn linear() -> Self {
        BasisSpec::new("linear", vec![|_| 1.0, |x| x]).expect("linear basis is bounded")
    }

    /// `f(x) = (1, x, x²)`.
    pub fn quadratic() -> Self {
        BasisSpec::new("quadratic", vec![|_| 1.0, |x| x, |x| x * x])
            .expect("quadratic basis is bounded")
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "linear" => Ok(Self::linear()),
            "quadratic" => Ok(Self::quadratic()),
            other => Err(Error::InvalidArgument(format!("unknown basis `{other}`"))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn k(&self) -> usize {
        self.funcs.len()
    }

    pub fn is_linear(&self) -> bool {
        self.name == "linear" && self.k() == 2
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        self.funcs.iter().map(|f| f(x)).collect()
    }

    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        for (o, f) in out.iter_mut().zip(&self.funcs) {
            *o = f(x);
        }
    }

    /// `max_k sup_x |f_k(x)|` over the bound-check grid.
    pub fn sup_norm(&self) -> f64 {
        (0..BOUND_CHECK_POINTS)
            .map(|i| i as f64 / (BOUND_CHECK_POINTS - 1) as f64)
            .flat_map(|x| self.funcs.iter().map(move |f| f(x).abs()))
            .fold(0.0, f64::max)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Individual coefficient vectors for the untreated (`theta`) and treated
/// (`psi`) potential outcome functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
}

impl Coefficients {
    pub fn new(theta: Vec<f64>, psi: Vec<f64>) -> Result<Self> {
        if theta.len() != psi.len() {
            return Err(Error::InvalidArgument("theta and psi lengths differ".into()));
        }
        if theta.iter().chain(&psi).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("coefficients must be finite".into()));
        }
        Ok(Coefficients { theta, psi })
    }

    /// Linear-basis shorthand: `Y = α + β d + γ d̄ + δ d d̄`.
    pub fn linear(alpha: f64, beta: f64, gamma: f64, delta: f64) -> Self {
        Coefficients {
            theta: vec![alpha, gamma],
            psi: vec![alpha + beta, gamma + delta],
        }
    }

    pub fn contrast(&self) -> Vec<f64> {
        self.psi.iter().zip(&self.theta).map(|(p, t)| p - t).collect()
    }
}

fn check_dbar(dbar: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&dbar) {
        return Err(Error::InvalidArgument(format!(
            "neighbor take-up share {dbar} outside [0, 1]"
        )));
    }
    Ok(())
}

/// `f(d̄)' [(1 - d) θ + d ψ]`.
pub fn potential_outcome(coef: &Coefficients, basis: &BasisSpec, d: bool, dbar: f64) -> Result<f64> {
    check_dbar(dbar)?;
    let f = basis.eval(dbar);
    Ok(if d { dot(&f, &coef.psi) } else { dot(&f, &coef.theta) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subpopulation {
    Population,
    Complier,
    NeverTaker,
}

impl fmt::Display for Subpopulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subpopulation::Population => "population",
            Subpopulation::Complier => "complier",
            Subpopulation::NeverTaker => "never_taker",
        })
    }
}

/// Mean coefficients of a sub-population. Only the identified components are
/// populated: never-takers carry `theta` alone; compliers may carry the
/// contrast `E[ψ - θ | C = 1]` as well.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanCoefficients {
    pub label: Subpopulation,
    pub theta_mean: Option<Vec<f64>>,
    pub contrast_mean: Option<Vec<f64>>,
}

impl MeanCoefficients {
    pub fn new(
        label: Subpopulation,
        theta_mean: Option<Vec<f64>>,
        contrast_mean: Option<Vec<f64>>,
    ) -> Result<Self> {
        if label == Subpopulation::NeverTaker && contrast_mean.is_some() {
            return Err(Error::Unidentified(
                "never-takers are never treated, so their treatment contrast is not identified".into(),
            ));
        }
        if let (Some(t), Some(c)) = (&theta_mean, &contrast_mean) {
            if t.len() != c.len() {
                return Err(Error::InvalidArgument("theta and contrast lengths differ".into()));
            }
        }
        Ok(MeanCoefficients {
            label,
            theta_mean,
            contrast_mean,
        })
    }

    pub fn psi_mean(&self) -> Option<Vec<f64>> {
        let t = self.theta_mean.as_ref()?;
        let c = self.contrast_mean.as_ref()?;
        Some(t.iter().zip(c).map(|(a, b)| a + b).collect())
    }
}

/// `DE(d̄) = f(d̄)' E[ψ - θ]` for the sub-population.
pub fn direct_effect(mean: &MeanCoefficients, basis: &BasisSpec, dbar: f64) -> Result<f64> {
    check_dbar(dbar)?;
    if mean.label == Subpopulation::NeverTaker {
        return Err(Error::Unidentified(
            "direct effects are not identified for never-takers".into(),
        ));
    }
    let contrast = mean.contrast_mean.as_ref().ok_or_else(|| {
        Error::Unidentified(format!("no treatment contrast available for {}", mean.label))
    })?;
    Ok(dot(&basis.eval(dbar), contrast))
}

/// `IE_d(d̄, Δ) = [f(d̄ + Δ) - f(d̄)]' E[(1 - d) θ + d ψ]`.
pub fn indirect_effect(
    mean: &MeanCoefficients,
    basis: &BasisSpec,
    d: bool,
    dbar: f64,
    delta: f64,
) -> Result<f64> {
    check_dbar(dbar)?;
    if delta <= 0.0 || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!("increment {delta} must be positive")));
    }
    if dbar + delta > 1.0 + 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "d̄ + Δ = {} exceeds 1",
            dbar + delta
        )));
    }
    let coef = if d {
        if mean.label == Subpopulation::NeverTaker {
            return Err(Error::Unidentified(
                "spillovers on the treated are not identified for never-takers".into(),
            ));
        }
        mean.psi_mean().ok_or_else(|| {
            Error::Unidentified(format!("E[ψ] not available for {}", mean.label))
        })?
    } else {
        mean.theta_mean
            .clone()
            .ok_or_else(|| Error::Unidentified(format!("E[θ] not available for {}", mean.label)))?
    };
    let hi = basis.eval((dbar + delta).min(1.0));
    let lo = basis.eval(dbar);
    Ok(hi.iter().zip(&lo).zip(&coef).map(|((h, l), c)| (h - l) * c).sum())
}

//! Direct and indirect effect curves with pointwise delta-method bands.
//!
//! Every identified effect is linear in one block of mean coefficients:
//!
//! ```text
//! DE(d̄)      = f(d̄)' E[ψ - θ | C = 1]
//! IE_d(d̄, Δ) = [f(d̄ + Δ) - f(d̄)]' E[(1 - d) θ + d ψ | ·]
//! Y_d(d̄)     = f(d̄)' E[(1 - d) θ + d ψ | ·]
//! ```
//!
//! so its variance is `a' V a` with `a` the loading vector above.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{EstimateResult, Target};
use crate::model::{BasisSpec, Subpopulation};
use crate::stats::Z_95;

pub const DEFAULT_GRID_POINTS: usize = 101;
pub const DEFAULT_DELTA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Effect {
    Direct,
    /// Indirect effect holding own treatment at `d`.
    Indirect(bool),
    /// Average potential outcome line at own treatment `d`.
    Outcome(bool),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EffectKind {
    pub effect: Effect,
    pub population: Subpopulation,
}

impl EffectKind {
    pub const DE_TREATED: EffectKind = EffectKind::new(Effect::Direct, Subpopulation::Complier);
    pub const IE0_POPULATION: EffectKind = EffectKind::new(Effect::Indirect(false), Subpopulation::Population);
    pub const IE0_TREATED: EffectKind = EffectKind::new(Effect::Indirect(false), Subpopulation::Complier);
    pub const IE1_TREATED: EffectKind = EffectKind::new(Effect::Indirect(true), Subpopulation::Complier);
    pub const IE0_NEVER_TAKER: EffectKind = EffectKind::new(Effect::Indirect(false), Subpopulation::NeverTaker);
    pub const Y0_TREATED: EffectKind = EffectKind::new(Effect::Outcome(false), Subpopulation::Complier);
    pub const Y1_TREATED: EffectKind = EffectKind::new(Effect::Outcome(true), Subpopulation::Complier);

    /// The curves plotted by default: every identified effect plus both
    /// complier outcome lines.
    pub const IDENTIFIED: [EffectKind; 7] = [
        EffectKind::DE_TREATED,
        EffectKind::IE0_POPULATION,
        EffectKind::IE0_TREATED,
        EffectKind::IE1_TREATED,
        EffectKind::IE0_NEVER_TAKER,
        EffectKind::Y0_TREATED,
        EffectKind::Y1_TREATED,
    ];

    pub const fn new(effect: Effect, population: Subpopulation) -> Self {
        EffectKind { effect, population }
    }

    /// Estimation target supplying this kind's coefficient block.
    pub fn source_target(self) -> Result<Target> {
        self.check_identified()?;
        Ok(match (self.effect, self.population) {
            (Effect::Direct, _) | (_, Subpopulation::Population) => Target::Joint,
            (Effect::Indirect(true) | Effect::Outcome(true), _) => Target::ComplierPsi,
            (_, Subpopulation::Complier) => Target::ComplierTheta,
            (_, Subpopulation::NeverTaker) => Target::NeverTakerTheta,
        })
    }

    pub fn is_indirect(self) -> bool {
        matches!(self.effect, Effect::Indirect(_))
    }

    /// Rejects effects that involve the treated potential outcome of
    /// never-takers or of the population as a whole.
    pub fn check_identified(self) -> Result<()> {
        let needs_psi = match self.effect {
            Effect::Direct => true,
            Effect::Indirect(d) | Effect::Outcome(d) => d,
        };
        if needs_psi && self.population != Subpopulation::Complier {
            return Err(Error::Unidentified(format!(
                "{self} involves the treated outcome of {}, who are not observed treated",
                self.population
            )));
        }
        Ok(())
    }
}

fn population_tag(p: Subpopulation) -> &'static str {
    match p {
        Subpopulation::Population => "population",
        Subpopulation::Complier => "treated",
        Subpopulation::NeverTaker => "never_taker",
    }
}

impl fmt::Display for EffectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head = match self.effect {
            Effect::Direct => "DE",
            Effect::Indirect(false) => "IE0",
            Effect::Indirect(true) => "IE1",
            Effect::Outcome(false) => "Y0",
            Effect::Outcome(true) => "Y1",
        };
        write!(f, "{head}_{}", population_tag(self.population))
    }
}

impl FromStr for EffectKind {
    type Err = Error;

    /// Parses names such as `DE_treated`, `IE0_never_taker` or `Y1_treated`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown effect kind {s:?}"));
        let (head, tail) = s.split_once('_').ok_or_else(bad)?;
        let effect = match head {
            "DE" => Effect::Direct,
            "IE0" => Effect::Indirect(false),
            "IE1" => Effect::Indirect(true),
            "Y0" => Effect::Outcome(false),
            "Y1" => Effect::Outcome(true),
            _ => return Err(bad()),
        };
        let population = match tail {
            "population" => Subpopulation::Population,
            "treated" | "complier" => Subpopulation::Complier,
            "never_taker" => Subpopulation::NeverTaker,
            _ => return Err(bad()),
        };
        Ok(EffectKind { effect, population })
    }
}

/// A mean-coefficient vector with its covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientBlock {
    pub mean: Vec<f64>,
    pub vcov: DMatrix<f64>,
}

impl CoefficientBlock {
    pub fn new(mean: Vec<f64>, vcov: DMatrix<f64>) -> Result<Self> {
        if vcov.shape() != (mean.len(), mean.len()) {
            return Err(Error::InvalidArgument(format!(
                "covariance shape {:?} does not match {} coefficients",
                vcov.shape(),
                mean.len()
            )));
        }
        Ok(CoefficientBlock { mean, vcov })
    }
}

/// Estimated coefficient blocks available for effect curves.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EffectInputs {
    pub theta_population: Option<CoefficientBlock>,
    pub theta_complier: Option<CoefficientBlock>,
    pub theta_never_taker: Option<CoefficientBlock>,
    pub psi_complier: Option<CoefficientBlock>,
    pub contrast_complier: Option<CoefficientBlock>,
}

impl EffectInputs {
    /// Collects blocks from estimation results. The joint target supplies
    /// both the population `θ` and the complier contrast.
    pub fn from_estimates(results: &[EstimateResult]) -> Result<Self> {
        let mut out = EffectInputs::default();
        let block = |r: &EstimateResult, start: usize, len: usize| {
            let (m, v) = r.block(start, len);
            CoefficientBlock::new(m, v)
        };
        for r in results {
            let p = r.coefficients.len();
            match r.target {
                Target::Joint => {
                    out.theta_population = Some(block(r, 0, p / 2)?);
                    out.contrast_complier = Some(block(r, p / 2, p / 2)?);
                }
                Target::PopulationTheta => {
                    if out.theta_population.is_none() {
                        out.theta_population = Some(block(r, 0, p)?);
                    }
                }
                Target::NeverTakerTheta => out.theta_never_taker = Some(block(r, 0, p)?),
                Target::ComplierTheta => out.theta_complier = Some(block(r, 0, p)?),
                Target::ComplierPsi => out.psi_complier = Some(block(r, 0, p)?),
                Target::Naive => {}
            }
        }
        Ok(out)
    }

    fn block_for(&self, kind: EffectKind) -> Result<&CoefficientBlock> {
        kind.check_identified()?;
        let (slot, what) = match (kind.effect, kind.population) {
            (Effect::Direct, _) => (&self.contrast_complier, "the joint target"),
            (Effect::Indirect(true) | Effect::Outcome(true), _) => (&self.psi_complier, "the complier-psi target"),
            (_, Subpopulation::Population) => (&self.theta_population, "the population or joint target"),
            (_, Subpopulation::Complier) => (&self.theta_complier, "the complier-theta target"),
            (_, Subpopulation::NeverTaker) => (&self.theta_never_taker, "the never-taker target"),
        };
        slot.as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{kind} needs an estimate of {what}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectCurve {
    pub kind: String,
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    pub grid: Vec<f64>,
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
}

/// `n` equally spaced points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// Default grid: 101 points on `[0, 1]`, or on `[0, 1 - Δ]` for indirect
/// effects.
pub fn default_grid(kind: EffectKind, delta: f64) -> Vec<f64> {
    let hi = if kind.is_indirect() { 1.0 - delta } else { 1.0 };
    linspace(0.0, hi, DEFAULT_GRID_POINTS)
}

/// Loading vector `a` with effect = `a' b` for the kind's coefficient block.
pub fn loading(kind: EffectKind, basis: &BasisSpec, dbar: f64, delta: f64) -> Vec<f64> {
    let f = basis.eval(dbar);
    match kind.effect {
        Effect::Indirect(_) => basis
            .eval(dbar + delta)
            .iter()
            .zip(&f)
            .map(|(hi, lo)| hi - lo)
            .collect(),
        Effect::Direct | Effect::Outcome(_) => f,
    }
}

fn label(kind: EffectKind) -> String {
    let who = match kind.population {
        Subpopulation::Population => "population",
        Subpopulation::Complier => "treated compliers",
        Subpopulation::NeverTaker => "never-takers",
    };
    match kind.effect {
        Effect::Direct => format!("direct effect, {who}"),
        Effect::Indirect(d) => format!("indirect effect at d = {}, {who}", u8::from(d)),
        Effect::Outcome(d) => format!("average potential outcome at d = {}, {who}", u8::from(d)),
    }
}

pub fn effect_curve(
    inputs: &EffectInputs,
    basis: &BasisSpec,
    kind: EffectKind,
    grid: &[f64],
    delta: f64,
) -> Result<EffectCurve> {
    let block = inputs.block_for(kind)?;
    if block.mean.len() != basis.k() {
        return Err(Error::InvalidArgument(format!(
            "{} coefficients for a basis of {} functions",
            block.mean.len(),
            basis.k()
        )));
    }
    if kind.is_indirect() && !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("increment {delta} must be positive")));
    }
    let b = DVector::from_column_slice(&block.mean);
    let mut curve = EffectCurve {
        kind: kind.to_string(),
        label: label(kind),
        delta: kind.is_indirect().then_some(delta),
        grid: grid.to_vec(),
        estimate: Vec::with_capacity(grid.len()),
        se: Vec::with_capacity(grid.len()),
        ci_low: Vec::with_capacity(grid.len()),
        ci_high: Vec::with_capacity(grid.len()),
    };
    for &x in grid {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::InvalidArgument(format!("grid point {x} outside [0, 1]")));
        }
        if kind.is_indirect() && x + delta > 1.0 + 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "grid point {x} plus increment {delta} exceeds 1"
            )));
        }
        let a = DVector::from_vec(loading(kind, basis, x, delta));
        let point = a.dot(&b);
        let se = (a.transpose() * &block.vcov * &a)[(0, 0)].max(0.0).sqrt();
        curve.estimate.push(point);
        curve.se.push(se);
        curve.ci_low.push(point - Z_95 * se);
        curve.ci_high.push(point + Z_95 * se);
    }
    Ok(curve)
}

pub const EFFECTS_HEADER: [&str; 6] = ["kind", "dbar", "estimate", "se", "ci_low", "ci_high"];

pub fn write_effects_csv<W: Write>(curves: &[EffectCurve], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(EFFECTS_HEADER)?;
    for c in curves {
        for i in 0..c.grid.len() {
            w.write_record([
                c.kind.clone(),
                c.grid[i].to_string(),
                c.estimate[i].to_string(),
                c.se[i].to_string(),
                c.ci_low[i].to_string(),
                c.ci_high[i].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{direct_effect, indirect_effect, MeanCoefficients};
    use proptest::prelude::*;

    fn block(mean: &[f64], var: &[f64]) -> CoefficientBlock {
        CoefficientBlock::new(mean.to_vec(), DMatrix::from_diagonal(&DVector::from_column_slice(var))).unwrap()
    }

    fn linear_inputs() -> EffectInputs {
        let cov = DMatrix::from_row_slice(2, 2, &[0.02, -0.005, -0.005, 0.03]);
        EffectInputs {
            theta_population: Some(block(&[0.5, -0.7], &[0.01, 0.02])),
            theta_complier: Some(CoefficientBlock::new(vec![0.43, -0.84], cov.clone()).unwrap()),
            theta_never_taker: Some(block(&[0.53, -0.64], &[0.01, 0.01])),
            psi_complier: Some(block(&[0.63, -0.04], &[0.02, 0.05])),
            contrast_complier: Some(block(&[0.2, 0.8], &[0.01, 0.04])),
        }
    }

    #[test]
    fn direct_effect_point_and_se() {
        let basis = BasisSpec::linear();
        let c = effect_curve(&linear_inputs(), &basis, EffectKind::DE_TREATED, &[0.25], 0.1).unwrap();
        assert!((c.estimate[0] - 0.4).abs() < 1e-15);
        assert!((c.se[0] - 0.0125f64.sqrt()).abs() < 1e-15);
        assert!((c.ci_high[0] - c.ci_low[0] - 2.0 * Z_95 * 0.0125f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn population_spillover_is_constant() {
        let basis = BasisSpec::linear();
        let grid = default_grid(EffectKind::IE0_POPULATION, 0.1);
        assert_eq!(grid.len(), 101);
        assert!((grid[100] - 0.9).abs() < 1e-15);
        let c = effect_curve(&linear_inputs(), &basis, EffectKind::IE0_POPULATION, &grid, 0.1).unwrap();
        for v in &c.estimate {
            assert!((v - 0.1 * -0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn treated_complier_outcome_line() {
        let basis = BasisSpec::linear();
        let c = effect_curve(&linear_inputs(), &basis, EffectKind::Y1_TREATED, &[0.0, 0.5, 1.0], 0.1).unwrap();
        assert_eq!(c.estimate, vec![0.63, 0.63 - 0.02, 0.63 - 0.04]);
    }

    #[test]
    fn unidentified_kinds_rejected() {
        let basis = BasisSpec::linear();
        for name in ["IE1_never_taker", "DE_never_taker", "DE_population", "Y1_population"] {
            let kind: EffectKind = name.parse().unwrap();
            let err = effect_curve(&linear_inputs(), &basis, kind, &[0.2], 0.1).unwrap_err();
            assert!(matches!(err, Error::Unidentified(_)), "{name}");
        }
        assert!(effect_curve(&linear_inputs(), &basis, EffectKind::IE0_TREATED, &[0.95], 0.1).is_err());
        assert!("IE2_treated".parse::<EffectKind>().is_err());
    }

    #[test]
    fn source_targets_fill_the_needed_block() {
        let inputs = linear_inputs();
        for k in EffectKind::IDENTIFIED {
            let t = k.source_target().unwrap();
            let only = match t {
                Target::Joint => EffectInputs {
                    theta_population: inputs.theta_population.clone(),
                    contrast_complier: inputs.contrast_complier.clone(),
                    ..EffectInputs::default()
                },
                Target::ComplierPsi => EffectInputs {
                    psi_complier: inputs.psi_complier.clone(),
                    ..EffectInputs::default()
                },
                Target::ComplierTheta => EffectInputs {
                    theta_complier: inputs.theta_complier.clone(),
                    ..EffectInputs::default()
                },
                _ => EffectInputs {
                    theta_never_taker: inputs.theta_never_taker.clone(),
                    ..EffectInputs::default()
                },
            };
            assert!(effect_curve(&only, &BasisSpec::linear(), k, &[0.2], 0.1).is_ok(), "{k}");
        }
        assert!("DE_never_taker".parse::<EffectKind>().unwrap().source_target().is_err());
    }

    #[test]
    fn kind_names_round_trip() {
        for k in EffectKind::IDENTIFIED {
            assert_eq!(k.to_string().parse::<EffectKind>().unwrap(), k);
        }
        assert_eq!(EffectKind::IE0_NEVER_TAKER.to_string(), "IE0_never_taker");
    }

    #[test]
    fn agrees_with_model_functionals() {
        let basis = BasisSpec::quadratic();
        let mean = MeanCoefficients::new(
            Subpopulation::Complier,
            Some(vec![0.1, 0.4, -0.3]),
            Some(vec![0.2, -0.1, 0.5]),
        )
        .unwrap();
        let psi: Vec<f64> = mean.psi_mean().unwrap();
        let inputs = EffectInputs {
            contrast_complier: Some(block(mean.contrast_mean.as_ref().unwrap(), &[0.0; 3])),
            psi_complier: Some(block(&psi, &[0.0; 3])),
            theta_complier: Some(block(mean.theta_mean.as_ref().unwrap(), &[0.0; 3])),
            ..EffectInputs::default()
        };
        for x in [0.0, 0.3, 0.7] {
            let de = effect_curve(&inputs, &basis, EffectKind::DE_TREATED, &[x], 0.2).unwrap();
            assert!((de.estimate[0] - direct_effect(&mean, &basis, x).unwrap()).abs() < 1e-14);
            for (d, kind) in [(false, EffectKind::IE0_TREATED), (true, EffectKind::IE1_TREATED)] {
                let ie = effect_curve(&inputs, &basis, kind, &[x], 0.2).unwrap();
                let want = indirect_effect(&mean, &basis, d, x, 0.2).unwrap();
                assert!((ie.estimate[0] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn from_estimates_requires_targets() {
        let inputs = EffectInputs::default();
        let err = effect_curve(&inputs, &BasisSpec::linear(), EffectKind::DE_TREATED, &[0.1], 0.1);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn csv_layout() {
        let basis = BasisSpec::linear();
        let c = effect_curve(&linear_inputs(), &basis, EffectKind::DE_TREATED, &[0.0, 0.5], 0.1).unwrap();
        let mut buf = Vec::new();
        write_effects_csv(&[c], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "kind,dbar,estimate,se,ci_low,ci_high");
        assert!(lines.next().unwrap().starts_with("DE_treated,0,0.2,0.1,"));
        assert_eq!(text.lines().count(), 3);
    }

    fn effect_value(kind: EffectKind, basis: &BasisSpec, b: &[f64], x: f64, delta: f64) -> f64 {
        let f = |t: f64| -> f64 { basis.eval(t).iter().zip(b).map(|(fi, bi)| fi * bi).sum() };
        match kind.effect {
            Effect::Indirect(_) => f(x + delta) - f(x),
            _ => f(x),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gradient_matches_finite_differences(
            b in proptest::collection::vec(-2.0f64..2.0, 3),
            x in 0.0f64..0.8,
            which in 0usize..7,
        ) {
            let basis = BasisSpec::quadratic();
            let kind = EffectKind::IDENTIFIED[which];
            let delta = 0.15;
            let a = loading(kind, &basis, x, delta);
            let h = 1e-6;
            for j in 0..3 {
                let mut up = b.clone();
                let mut dn = b.clone();
                up[j] += h;
                dn[j] -= h;
                let fd = (effect_value(kind, &basis, &up, x, delta) - effect_value(kind, &basis, &dn, x, delta)) / (2.0 * h);
                prop_assert!((fd - a[j]).abs() <= 1e-6 * a[j].abs().max(1.0), "{} vs {}", fd, a[j]);
            }
        }

        #[test]
        fn linear_shapes(theta in proptest::collection::vec(-2.0f64..2.0, 2), contrast in proptest::collection::vec(-2.0f64..2.0, 2)) {
            let basis = BasisSpec::linear();
            let inputs = EffectInputs {
                theta_population: Some(block(&theta, &[0.01, 0.01])),
                contrast_complier: Some(block(&contrast, &[0.01, 0.02])),
                ..EffectInputs::default()
            };
            let grid = linspace(0.0, 0.9, 10);
            let ie = effect_curve(&inputs, &basis, EffectKind::IE0_POPULATION, &grid, 0.1).unwrap();
            for v in &ie.estimate {
                prop_assert!((v - 0.1 * theta[1]).abs() < 1e-12);
            }
            let de = effect_curve(&inputs, &basis, EffectKind::DE_TREATED, &grid, 0.1).unwrap();
            for (x, v) in grid.iter().zip(&de.estimate) {
                prop_assert!((v - (contrast[0] + contrast[1] * x)).abs() < 1e-12);
            }
            for i in 0..grid.len() {
                prop_assert!(de.ci_low[i] <= de.estimate[i] && de.estimate[i] <= de.ci_high[i]);
            }
        }

        #[test]
        fn direct_effect_additivity(
            theta in proptest::collection::vec(-2.0f64..2.0, 3),
            contrast in proptest::collection::vec(-2.0f64..2.0, 3),
            x in 0.01f64..1.0,
        ) {
            let basis = BasisSpec::quadratic();
            let psi: Vec<f64> = theta.iter().zip(&contrast).map(|(t, c)| t + c).collect();
            let zero = DMatrix::zeros(3, 3);
            let inputs = EffectInputs {
                theta_complier: Some(CoefficientBlock::new(theta.clone(), zero.clone()).unwrap()),
                psi_complier: Some(CoefficientBlock::new(psi, zero.clone()).unwrap()),
                contrast_complier: Some(CoefficientBlock::new(contrast, zero).unwrap()),
                ..EffectInputs::default()
            };
            let de = |t: f64| effect_curve(&inputs, &basis, EffectKind::DE_TREATED, &[t], 0.1).unwrap().estimate[0];
            let ie = |k: EffectKind| effect_curve(&inputs, &basis, k, &[0.0], x).unwrap().estimate[0];
            let rebuilt = ie(EffectKind::IE1_TREATED) - ie(EffectKind::IE0_TREATED) + de(0.0);
            prop_assert!((de(x) - rebuilt).abs() < 1e-12);
        }
    }
}

//! Transformed-instrument IV estimation of sub-population mean coefficients.
//!
//! Every target solves `Σ_g Σ_i Ẑ_ig (Y_ig - X_ig' b) = 0` where the
//! instrument `Ẑ = R(Ĉ, N)⁺ W` rescales a simple weight vector by the
//! design-implied moment matrix evaluated at the estimated neighbor complier
//! share. Standard errors are clustered by group.

mod comparison;
mod instruments;
mod solve;

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use comparison::{ior_test, naive_iv, IorTestResult};
pub use instruments::{build_instruments, estimate_chat, InstrumentSet};
pub use solve::SINGULAR_CONDITION;

use crate::design::SaturationDesign;
use crate::dgp::ExperimentData;
use crate::error::{Error, Result};
use crate::model::{BasisSpec, MeanCoefficients, Subpopulation};
use solve::{solve, symmetrize, IvFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    /// Population `E[θ]` jointly with the complier contrast `E[ψ - θ | C = 1]`.
    Joint,
    /// `E[ψ | C = 1]`.
    ComplierPsi,
    /// `E[θ | C = 0]`.
    #[serde(rename = "never-taker")]
    NeverTakerTheta,
    /// `E[θ]`.
    #[serde(rename = "population")]
    PopulationTheta,
    /// `E[θ | C = 1]`, combined from the population and never-taker targets.
    ComplierTheta,
    /// IV of `Y` on `(1, D, D̄, D D̄)` with instruments `(1, Z, S, Z S)`.
    Naive,
}

impl Target {
    pub const ALL: [Target; 6] = [
        Target::Joint,
        Target::ComplierPsi,
        Target::NeverTakerTheta,
        Target::PopulationTheta,
        Target::ComplierTheta,
        Target::Naive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Joint => "joint",
            Target::ComplierPsi => "complier-psi",
            Target::NeverTakerTheta => "never-taker",
            Target::PopulationTheta => "population",
            Target::ComplierTheta => "complier-theta",
            Target::Naive => "naive",
        }
    }

    /// Coefficient names. The linear basis gets the conventional
    /// `α + β d + γ d̄ + δ d d̄` labels.
    pub fn coefficient_names(self, basis: &BasisSpec) -> Vec<String> {
        let k = basis.k();
        let generic = |prefix: &str| (0..k).map(|j| format!("{prefix}_{j}")).collect::<Vec<_>>();
        let names = |a: &str, b: &str| vec![a.to_string(), b.to_string()];
        match (self, basis.is_linear()) {
            (Target::Naive, _) => ["alpha_naive", "beta_c_naive", "gamma_naive", "delta_c_naive"]
                .map(String::from)
                .to_vec(),
            (Target::Joint, true) => ["alpha", "gamma", "beta_c", "delta_c"].map(String::from).to_vec(),
            (Target::Joint, false) => {
                let mut v = generic("theta");
                v.extend(generic("contrast_c"));
                v
            }
            (Target::PopulationTheta, true) => names("alpha", "gamma"),
            (Target::PopulationTheta, false) => generic("theta"),
            (Target::NeverTakerTheta, true) => names("alpha_n", "gamma_n"),
            (Target::NeverTakerTheta, false) => generic("theta_n"),
            (Target::ComplierTheta, true) => names("alpha_c", "gamma_c"),
            (Target::ComplierTheta, false) => generic("theta_c"),
            (Target::ComplierPsi, true) => names("alpha_plus_beta_c", "gamma_plus_delta_c"),
            (Target::ComplierPsi, false) => generic("psi_c"),
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown target {s:?}")))
    }
}

/// Treatment of 0%-saturation groups for the joint and population targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PureControlPolicy {
    /// Leave them out; moment matrices are conditional on `S > 0`.
    Drop,
    /// Keep them through an extra `1{S = 0}` instrument and solve by 2SLS.
    Gmm,
}

impl FromStr for PureControlPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop" => Ok(PureControlPolicy::Drop),
            "gmm" => Ok(PureControlPolicy::Gmm),
            _ => Err(Error::InvalidArgument(format!("unknown pure-control policy {s:?}"))),
        }
    }
}

/// Source of the neighbor complier share used to evaluate `R`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatPolicy {
    /// Leave-one-out plug-in `Ĉ` (the feasible estimator).
    Estimated,
    /// True `C̄` from simulated latent data (the infeasible estimator).
    Latent,
}

#[derive(Debug, Clone)]
pub struct EstimationOptions {
    pub basis: BasisSpec,
    /// `None` means GMM whenever the data contain pure-control groups.
    pub pure_control: Option<PureControlPolicy>,
    pub chat: ChatPolicy,
    /// Multiply the cluster sandwich by `G / (G - 1)`.
    pub small_sample: bool,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        EstimationOptions {
            basis: BasisSpec::linear(),
            pure_control: None,
            chat: ChatPolicy::Estimated,
            small_sample: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Individuals whose moment matrix `R(Ĉ, N)` had to be pseudo-inverted.
    pub pinv_count: usize,
    /// Smallest `|det R(Ĉ, N)|` encountered.
    pub min_abs_det: Option<f64>,
    pub condition_number: f64,
    pub method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pure_control: Option<PureControlPolicy>,
    pub excluded_groups: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compliance_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub target: Target,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub se: Vec<f64>,
    pub vcov: Vec<Vec<f64>>,
    pub groups_used: usize,
    pub individuals_used: usize,
    pub diagnostics: Diagnostics,
    /// Per-group influence `ψ_g` with `coefficients - plim ≈ Σ_g ψ_g`.
    #[serde(skip)]
    pub influence: Vec<(u64, Vec<f64>)>,
}

impl EstimateResult {
    fn from_fit(target: Target, names: Vec<String>, fit: IvFit, diagnostics: Diagnostics) -> Self {
        let vcov = fit.vcov;
        EstimateResult {
            target,
            names,
            coefficients: fit.coef.iter().copied().collect(),
            se: (0..vcov.nrows()).map(|i| vcov[(i, i)].max(0.0).sqrt()).collect(),
            vcov: matrix_rows(&vcov),
            groups_used: fit.groups,
            individuals_used: fit.rows,
            diagnostics,
            influence: fit
                .influence
                .into_iter()
                .map(|(id, v)| (id, v.iter().copied().collect()))
                .collect(),
        }
    }

    pub fn vcov_matrix(&self) -> DMatrix<f64> {
        let p = self.coefficients.len();
        DMatrix::from_fn(p, p, |i, j| self.vcov[i][j])
    }

    pub fn coefficient(&self, name: &str) -> Option<(f64, f64)> {
        let j = self.names.iter().position(|n| n == name)?;
        Some((self.coefficients[j], self.se[j]))
    }

    /// Range of coefficients as a vector together with its covariance block.
    pub fn block(&self, start: usize, len: usize) -> (Vec<f64>, DMatrix<f64>) {
        let v = self.vcov_matrix();
        (
            self.coefficients[start..start + len].to_vec(),
            v.view((start, start), (len, len)).into_owned(),
        )
    }
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn check_basis(target: Target, opts: &EstimationOptions) -> Result<()> {
    if target == Target::Naive && !opts.basis.is_linear() {
        return Err(Error::InvalidArgument(
            "the naive comparison regression is defined for the linear basis only".into(),
        ));
    }
    Ok(())
}

/// Transformed-instrument estimate for one of the joint, complier-ψ,
/// never-taker or population targets.
pub fn rsiv_estimate(
    data: &ExperimentData,
    design: &SaturationDesign,
    target: Target,
    opts: &EstimationOptions,
) -> Result<EstimateResult> {
    let set = build_instruments(data, design, target, opts)?;
    let fit = solve(&set.blocks, set.l, set.p, opts.small_sample)?;
    let overidentified = set.l > set.p;
    let diagnostics = Diagnostics {
        pinv_count: set.pinv_count,
        min_abs_det: set.min_abs_det,
        condition_number: fit.condition,
        method: if overidentified { "2sls" } else { "iv" }.into(),
        pure_control: (set.pure_control_groups > 0 || set.excluded_groups > 0).then_some(if overidentified {
            PureControlPolicy::Gmm
        } else {
            PureControlPolicy::Drop
        }),
        excluded_groups: set.excluded_groups,
        compliance_rate: None,
    };
    Ok(EstimateResult::from_fit(
        target,
        target.coefficient_names(&opts.basis),
        fit,
        diagnostics,
    ))
}

/// The over-identified variant that keeps pure-control groups through an
/// extra `1{S = 0}` instrument. Only the joint and population targets use
/// pure-control groups.
pub fn rsiv_pure_control(
    data: &ExperimentData,
    design: &SaturationDesign,
    target: Target,
    opts: &EstimationOptions,
) -> Result<EstimateResult> {
    if !matches!(target, Target::Joint | Target::PopulationTheta) {
        return Err(Error::InvalidArgument(format!(
            "pure-control groups carry no information on the {target} target"
        )));
    }
    if !design.has_pure_control() || !data.groups.iter().any(|g| g.is_pure_control()) {
        return Err(Error::InvalidArgument(
            "pure-control estimation needs 0% saturation groups in the design and the data".into(),
        ));
    }
    let opts = EstimationOptions {
        pure_control: Some(PureControlPolicy::Gmm),
        ..opts.clone()
    };
    rsiv_estimate(data, design, target, &opts)
}

/// Share of offered individuals who take up treatment, i.e. `E[C]`.
pub fn compliance_rate(data: &ExperimentData) -> Result<f64> {
    let (mut offered, mut treated) = (0usize, 0usize);
    for g in &data.groups {
        offered += g.z.iter().filter(|&&z| z).count();
        treated += g.d.iter().filter(|&&d| d).count();
    }
    if offered == 0 {
        return Err(Error::Unidentified("nobody was offered treatment".into()));
    }
    Ok(treated as f64 / offered as f64)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Unidentified(format!(
            "compliance rate {rate} must lie strictly between 0 and 1"
        )));
    }
    Ok(())
}

/// `E[θ | C = 1] = E[θ | C = 0] + (E[θ] - E[θ | C = 0]) / E[C]`.
pub fn complier_theta_point(population: &[f64], never_taker: &[f64], rate: f64) -> Result<Vec<f64>> {
    check_rate(rate)?;
    if population.len() != never_taker.len() {
        return Err(Error::InvalidArgument("coefficient lengths differ".into()));
    }
    Ok(population
        .iter()
        .zip(never_taker)
        .map(|(t, n)| n + (t - n) / rate)
        .collect())
}

/// Complier mean of `θ` as [`MeanCoefficients`].
pub fn complier_theta(
    population: &EstimateResult,
    never_taker: &EstimateResult,
    rate: f64,
) -> Result<MeanCoefficients> {
    if population.target != Target::PopulationTheta || never_taker.target != Target::NeverTakerTheta {
        return Err(Error::InvalidArgument(
            "complier θ combines a population and a never-taker estimate".into(),
        ));
    }
    let theta = complier_theta_point(&population.coefficients, &never_taker.coefficients, rate)?;
    MeanCoefficients::new(Subpopulation::Complier, Some(theta), None)
}

/// Complier `θ` with a delta-method cluster covariance built from the
/// per-group influences of the two estimates and of the compliance rate.
pub fn complier_theta_estimate(
    data: &ExperimentData,
    population: &EstimateResult,
    never_taker: &EstimateResult,
    opts: &EstimationOptions,
) -> Result<EstimateResult> {
    let rate = compliance_rate(data)?;
    let theta = complier_theta_point(&population.coefficients, &never_taker.coefficients, rate)?;
    let k = theta.len();
    let offered: f64 = data
        .groups
        .iter()
        .map(|g| g.z.iter().filter(|&&z| z).count() as f64)
        .sum();

    let mut groups: Vec<_> = data.groups.iter().collect();
    groups.sort_by_key(|g| g.id);
    let lookup = |inf: &[(u64, Vec<f64>)], id: u64| -> Option<DVector<f64>> {
        inf.binary_search_by_key(&id, |(g, _)| *g)
            .ok()
            .map(|i| DVector::from_column_slice(&inf[i].1))
    };
    let gap = DVector::from_iterator(
        k,
        population
            .coefficients
            .iter()
            .zip(&never_taker.coefficients)
            .map(|(t, n)| t - n),
    );

    let mut influence = Vec::new();
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for g in groups {
        let psi_pop = lookup(&population.influence, g.id);
        let psi_nt = lookup(&never_taker.influence, g.id);
        let offered_g = g.z.iter().filter(|&&z| z).count() as f64;
        let treated_g = g.d.iter().filter(|&&d| d).count() as f64;
        let psi_rate = (treated_g - rate * offered_g) / offered;
        if psi_pop.is_none() && psi_nt.is_none() && psi_rate == 0.0 {
            continue;
        }
        let mut psi = &gap * (-psi_rate / (rate * rate));
        if let Some(v) = psi_pop {
            psi += v / rate;
        }
        if let Some(v) = psi_nt {
            psi += v * (1.0 - 1.0 / rate);
        }
        meat += &psi * psi.transpose();
        influence.push((g.id, psi.iter().copied().collect()));
    }
    let g = influence.len() as f64;
    if opts.small_sample && g > 1.0 {
        meat *= g / (g - 1.0);
    }
    let vcov = symmetrize(&meat);
    Ok(EstimateResult {
        target: Target::ComplierTheta,
        names: Target::ComplierTheta.coefficient_names(&opts.basis),
        coefficients: theta,
        se: (0..k).map(|i| vcov[(i, i)].max(0.0).sqrt()).collect(),
        vcov: matrix_rows(&vcov),
        groups_used: influence.len(),
        individuals_used: population.individuals_used.max(never_taker.individuals_used),
        diagnostics: Diagnostics {
            pinv_count: population.diagnostics.pinv_count + never_taker.diagnostics.pinv_count,
            min_abs_det: match (population.diagnostics.min_abs_det, never_taker.diagnostics.min_abs_det) {
                (Some(a), Some(b)) => Some(a.min(b)),
                (a, b) => a.or(b),
            },
            condition_number: population
                .diagnostics
                .condition_number
                .max(never_taker.diagnostics.condition_number),
            method: "delta_method".into(),
            pure_control: population.diagnostics.pure_control,
            excluded_groups: population.diagnostics.excluded_groups,
            compliance_rate: Some(rate),
        },
        influence,
    })
}

/// Runs any target, including the derived complier `θ` and the naive
/// comparison regression.
pub fn estimate(
    data: &ExperimentData,
    design: &SaturationDesign,
    target: Target,
    opts: &EstimationOptions,
) -> Result<EstimateResult> {
    check_basis(target, opts)?;
    match target {
        Target::Naive => {
            instruments::check_data_against_design(data, design)?;
            naive_iv(data, opts.small_sample)
        }
        Target::ComplierTheta => {
            let pop = rsiv_estimate(data, design, Target::PopulationTheta, opts)?;
            let nt = rsiv_estimate(data, design, Target::NeverTakerTheta, opts)?;
            complier_theta_estimate(data, &pop, &nt, opts)
        }
        _ => rsiv_estimate(data, design, target, opts),
    }
}

//! Randomized saturation designs.
//!
//! First stage: each group receives a saturation from a finite set, either by
//! a completely-at-random allocation of fixed counts or by i.i.d. draws from
//! a probability vector. Second stage: every member of a group assigned
//! saturation `s` is offered treatment independently with probability `s`.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BasisSpec;
use crate::moments;

const WEIGHT_TOL: f64 = 1e-12;

/// How groups are allocated to saturations.
#[derive(Debug, Clone, PartialEq)]
pub enum Allocation {
    /// Exactly `m_j` groups receive saturation `s_j`.
    Counts(Vec<u64>),
    /// Each group draws `s_j` independently with probability `p_j`.
    Probs(Vec<f64>),
}

/// Serialized form used in configuration files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    pub saturations: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DesignSpec", into = "DesignSpec")]
pub struct SaturationDesign {
    saturations: Vec<f64>,
    allocation: Allocation,
}

impl TryFrom<DesignSpec> for SaturationDesign {
    type Error = Error;

    fn try_from(spec: DesignSpec) -> Result<Self> {
        match (spec.counts, spec.probs) {
            (Some(c), None) => SaturationDesign::with_counts(spec.saturations, c),
            (None, Some(p)) => SaturationDesign::with_probs(spec.saturations, p),
            _ => Err(Error::InvalidDesign(
                "exactly one of `counts` or `probs` must be given".into(),
            )),
        }
    }
}

impl From<SaturationDesign> for DesignSpec {
    fn from(d: SaturationDesign) -> Self {
        let (counts, probs) = match d.allocation {
            Allocation::Counts(c) => (Some(c), None),
            Allocation::Probs(p) => (None, Some(p)),
        };
        DesignSpec {
            saturations: d.saturations,
            counts,
            probs,
        }
    }
}

impl SaturationDesign {
    pub fn with_counts(saturations: Vec<f64>, counts: Vec<u64>) -> Result<Self> {
        check_saturations(&saturations)?;
        if counts.len() != saturations.len() {
            return Err(Error::InvalidDesign(format!(
                "{} saturations but {} counts",
                saturations.len(),
                counts.len()
            )));
        }
        if counts.iter().sum::<u64>() == 0 {
            return Err(Error::InvalidDesign("counts sum to zero".into()));
        }
        Ok(SaturationDesign {
            saturations,
            allocation: Allocation::Counts(counts),
        })
    }

    pub fn with_probs(saturations: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        check_saturations(&saturations)?;
        if probs.len() != saturations.len() {
            return Err(Error::InvalidDesign(format!(
                "{} saturations but {} probabilities",
                saturations.len(),
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDesign("probabilities must be nonnegative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidDesign(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(SaturationDesign {
            saturations,
            allocation: Allocation::Probs(probs),
        })
    }

    /// Splits `groups` as evenly as possible over `saturations`, giving any
    /// remainder to the first saturations in the list.
    pub fn balanced(saturations: Vec<f64>, groups: u64) -> Result<Self> {
        let j = saturations.len() as u64;
        if j == 0 {
            return Err(Error::InvalidDesign("empty design".into()));
        }
        let counts = (0..j)
            .map(|i| groups / j + u64::from(i < groups % j))
            .collect();
        SaturationDesign::with_counts(saturations, counts)
    }

    pub fn saturations(&self) -> &[f64] {
        &self.saturations
    }

    pub fn allocation(&self) -> &Allocation {
        &self.allocation
    }

    /// Assignment probabilities `P(S = s_j)`.
    pub fn weights(&self) -> Vec<f64> {
        match &self.allocation {
            Allocation::Counts(c) => {
                let total = c.iter().sum::<u64>() as f64;
                c.iter().map(|&m| m as f64 / total).collect()
            }
            Allocation::Probs(p) => p.clone(),
        }
    }

    /// Support points with positive weight, paired with their weights.
    pub fn support(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.saturations
            .iter()
            .copied()
            .zip(self.weights())
            .filter(|(_, w)| *w > 0.0)
    }

    /// `E[S^a (1 - S)^b]` under the assignment weights.
    pub fn moment(&self, a: i32, b: i32) -> f64 {
        self.support()
            .map(|(s, w)| w * s.powi(a) * (1.0 - s).powi(b))
            .sum()
    }

    pub fn interior_count(&self) -> usize {
        self.support().filter(|(s, _)| *s > 0.0 && *s < 1.0).count()
    }

    pub fn has_pure_control(&self) -> bool {
        self.support().any(|(s, _)| s == 0.0)
    }

    /// True when `s` is one of the design's support points.
    pub fn contains(&self, s: f64) -> bool {
        self.support().any(|(t, _)| (t - s).abs() <= 1e-9)
    }

    /// The design conditional on `S > 0`: the zero atom is removed and the
    /// remaining weights renormalized.
    pub fn conditional_on_positive(&self) -> Result<Self> {
        let (sats, w): (Vec<f64>, Vec<f64>) = self.support().filter(|(s, _)| *s > 0.0).unzip();
        let total: f64 = w.iter().sum();
        if sats.is_empty() || total <= 0.0 {
            return Err(Error::InvalidDesign(
                "no positive saturation carries weight".into(),
            ));
        }
        let probs: Vec<f64> = w.iter().map(|x| x / total).collect();
        // renormalize once more so the sum is 1 to rounding
        let fix: f64 = probs.iter().sum();
        SaturationDesign::with_probs(sats, probs.iter().map(|p| p / fix).collect())
    }

    /// First stage: one saturation per group.
    pub fn sample_saturations<R: Rng + ?Sized>(&self, groups: usize, rng: &mut R) -> Result<Vec<f64>> {
        if groups == 0 {
            return Err(Error::InvalidArgument("number of groups must be positive".into()));
        }
        match &self.allocation {
            Allocation::Counts(counts) => {
                let total: u64 = counts.iter().sum();
                if total != groups as u64 {
                    return Err(Error::InvalidDesign(format!(
                        "counts sum to {total} but there are {groups} groups"
                    )));
                }
                let mut out: Vec<f64> = self
                    .saturations
                    .iter()
                    .zip(counts)
                    .flat_map(|(&s, &m)| std::iter::repeat_n(s, m as usize))
                    .collect();
                out.shuffle(rng);
                Ok(out)
            }
            Allocation::Probs(probs) => {
                let cumulative: Vec<f64> = probs
                    .iter()
                    .scan(0.0, |acc, p| {
                        *acc += p;
                        Some(*acc)
                    })
                    .collect();
                Ok((0..groups)
                    .map(|_| {
                        let u: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
                        let j = cumulative.iter().position(|&c| u < c).unwrap_or(probs.len() - 1);
                        self.saturations[j]
                    })
                    .collect())
            }
        }
    }
}

fn check_saturations(saturations: &[f64]) -> Result<()> {
    if saturations.is_empty() {
        return Err(Error::InvalidDesign("empty design".into()));
    }
    if let Some(s) = saturations.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidDesign(format!("saturation {s} outside [0, 1]")));
    }
    for (i, a) in saturations.iter().enumerate() {
        if saturations[..i].contains(a) {
            return Err(Error::InvalidDesign(format!("saturation {a} listed twice")));
        }
    }
    Ok(())
}

/// Second stage: i.i.d. Bernoulli(`s`) offers for a group of `n`.
pub fn assign_offers<R: Rng + ?Sized>(n: usize, s: f64, rng: &mut R) -> Result<Vec<bool>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "groups need at least two members, got {n}"
        )));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!("saturation {s} outside [0, 1]")));
    }
    Ok(if s == 0.0 {
        vec![false; n]
    } else if s == 1.0 {
        vec![true; n]
    } else {
        (0..n).map(|_| rng.random::<f64>() < s).collect()
    })
}

/// Identification diagnostics for a design and basis over a `(c̄, n)` grid.
#[derive(Debug, Clone, Serialize)]
pub struct DesignDiagnostics {
    pub saturations: Vec<f64>,
    /// Group counts when the design fixes them, otherwise `None`.
    pub counts: Option<Vec<u64>>,
    pub weights: Vec<f64>,
    pub interior_count: usize,
    /// Smallest determinant of `Q0` / `Q1` over the grid, each divided by the
    /// product of its diagonal.
    pub min_relative_det_q0: f64,
    pub min_relative_det_q1: f64,
    pub min_eigenvalue_q0: f64,
    pub min_eigenvalue_q1: f64,
    /// `Q0` or `Q1` is singular at every grid point.
    pub singular: bool,
    /// The large-group limit `E[S^z (1-S)^(1-z) f(c̄S) f(c̄S)']` is singular
    /// for some grid `c̄`: fewer distinct interior saturations than basis terms.
    pub limit_singular: bool,
    /// Relative determinant below `threshold` somewhere, or `limit_singular`.
    pub weak: bool,
    pub threshold: f64,
}

pub const DEFAULT_WEAK_THRESHOLD: f64 = 1e-10;
const SINGULAR_EIGEN_TOL: f64 = 1e-12;

fn relative_det(m: &DMatrix<f64>) -> f64 {
    let diag: f64 = m.diagonal().iter().product();
    if diag <= 0.0 {
        0.0
    } else {
        m.determinant() / diag
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

/// Evaluates `Q0`, `Q1` over the grid and reports rank problems.
pub fn validate_design(
    design: &SaturationDesign,
    basis: &BasisSpec,
    n_grid: &[usize],
    cbar_grid: &[f64],
    threshold: f64,
) -> Result<DesignDiagnostics> {
    let mut min_rd = [f64::INFINITY; 2];
    let mut min_eig = [f64::INFINITY; 2];
    let mut all_singular = true;
    for &n in n_grid {
        for &c in cbar_grid {
            let mut singular_here = false;
            for z in 0..2u8 {
                let q = moments::q_extended(basis, c, n, design, z, false)?;
                let rd = relative_det(&q);
                let eig = min_eigenvalue(&q);
                min_rd[z as usize] = min_rd[z as usize].min(rd);
                min_eig[z as usize] = min_eig[z as usize].min(eig);
                singular_here |= eig <= SINGULAR_EIGEN_TOL;
            }
            all_singular &= singular_here;
        }
    }
    let mut limit_singular = false;
    for &c in cbar_grid.iter().filter(|&&c| c > 0.0) {
        for z in 0..2u8 {
            let q = moments::q_limit(basis, c, design, z);
            let scale = q.diagonal().iter().cloned().fold(0.0, f64::max).max(1.0);
            limit_singular |= min_eigenvalue(&q) <= SINGULAR_EIGEN_TOL * scale;
        }
    }
    let counts = match design.allocation() {
        Allocation::Counts(c) => Some(c.clone()),
        Allocation::Probs(_) => None,
    };
    let empty_grid = n_grid.is_empty() || cbar_grid.is_empty();
    Ok(DesignDiagnostics {
        saturations: design.saturations().to_vec(),
        counts,
        weights: design.weights(),
        interior_count: design.interior_count(),
        min_relative_det_q0: min_rd[0],
        min_relative_det_q1: min_rd[1],
        min_eigenvalue_q0: min_eig[0],
        min_eigenvalue_q1: min_eig[1],
        singular: all_singular && !empty_grid,
        limit_singular,
        weak: limit_singular || min_rd[0] < threshold || min_rd[1] < threshold,
        threshold,
    })
}

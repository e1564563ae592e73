//! Design-implied moment matrices.
//!
//! For an individual whose neighbors contain `(n-1)c̄` compliers, the number
//! of treated neighbors given `S = s` is `Binomial((n-1)c̄, s)` whatever the
//! individual's own offer. Hence
//!
//! ```text
//! Q_z(c̄, n) = Σ_j w_j s_j^z (1 - s_j)^(1-z) Σ_m P(m; (n-1)c̄, s_j) f(m/(n-1)) f(m/(n-1))'
//! ```
//!
//! is known exactly from the design, and `Q = [[Q0 + Q1, Q1], [Q1, Q1]]`.
//! Off the integer lattice of `(n-1)c̄` the matrices are extended by linear
//! interpolation between the two neighboring lattice points.

use nalgebra::DMatrix;
use statrs::function::factorial::ln_binomial;

use crate::design::SaturationDesign;
use crate::error::{Error, Result};
use crate::model::BasisSpec;

/// Tolerance for treating `(n-1)c̄` as an integer.
pub const LATTICE_TOL: f64 = 1e-9;
/// Relative eigenvalue cutoff used by [`pseudo_inverse`].
pub const PINV_RTOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct MomentMatrices {
    pub q0: DMatrix<f64>,
    pub q1: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub cbar: f64,
    pub n: usize,
    pub condition_on_positive: bool,
}

/// Binomial probabilities `P(m; trials, p)` for `m = 0..=trials`, evaluated
/// in log space and renormalized to sum to one.
pub fn binomial_pmf(trials: u64, p: f64) -> Vec<f64> {
    let len = trials as usize + 1;
    if p <= 0.0 {
        let mut v = vec![0.0; len];
        v[0] = 1.0;
        return v;
    }
    if p >= 1.0 {
        let mut v = vec![0.0; len];
        v[len - 1] = 1.0;
        return v;
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let mut v: Vec<f64> = (0..=trials)
        .map(|m| (ln_binomial(trials, m) + m as f64 * lp + (trials - m) as f64 * lq).exp())
        .collect();
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

fn check_args(cbar: f64, n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("group size {n} < 2")));
    }
    if !(0.0..=1.0).contains(&cbar) {
        return Err(Error::InvalidArgument(format!("complier share {cbar} outside [0, 1]")));
    }
    Ok(())
}

fn effective_design(design: &SaturationDesign, condition_on_positive: bool) -> Result<SaturationDesign> {
    if condition_on_positive {
        design.conditional_on_positive()
    } else {
        Ok(design.clone())
    }
}

/// `Q_z` at a lattice point with `trials = (n-1)c̄` complier neighbors.
fn q_lattice(basis: &BasisSpec, trials: u64, n: usize, design: &SaturationDesign, z: u8) -> DMatrix<f64> {
    let k = basis.k();
    let denom = (n - 1) as f64;
    let fvals: Vec<Vec<f64>> = (0..=trials).map(|m| basis.eval(m as f64 / denom)).collect();
    let mut q = DMatrix::zeros(k, k);
    for (s, w) in design.support() {
        let offer = if z == 1 { s } else { 1.0 - s };
        let weight = w * offer;
        if weight == 0.0 {
            continue;
        }
        for (pm, f) in binomial_pmf(trials, s).iter().zip(&fvals) {
            let c = weight * pm;
            if c == 0.0 {
                continue;
            }
            for a in 0..k {
                for b in a..k {
                    q[(a, b)] += c * f[a] * f[b];
                }
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            q[(a, b)] = q[(b, a)];
        }
    }
    q
}

fn lattice_trials(cbar: f64, n: usize) -> Option<u64> {
    let x = (n - 1) as f64 * cbar;
    let r = x.round();
    ((x - r).abs() <= LATTICE_TOL).then_some(r as u64)
}

/// `Q_z(c̄, n)` by exact binomial enumeration. Requires `(n-1)c̄` to be an
/// integer; see [`q_extended`] otherwise.
pub fn q_exact_component(
    basis: &BasisSpec,
    cbar: f64,
    n: usize,
    design: &SaturationDesign,
    z: u8,
    condition_on_positive: bool,
) -> Result<DMatrix<f64>> {
    check_args(cbar, n)?;
    let trials = lattice_trials(cbar, n).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "(n-1)c̄ = {} is not an integer; use the interpolated extension",
            (n - 1) as f64 * cbar
        ))
    })?;
    let d = effective_design(design, condition_on_positive)?;
    Ok(q_lattice(basis, trials, n, &d, z))
}

/// `Q0`, `Q1` and the stacked `Q` by exact enumeration.
pub fn q_exact(
    basis: &BasisSpec,
    cbar: f64,
    n: usize,
    design: &SaturationDesign,
    condition_on_positive: bool,
) -> Result<MomentMatrices> {
    let q0 = q_exact_component(basis, cbar, n, design, 0, condition_on_positive)?;
    let q1 = q_exact_component(basis, cbar, n, design, 1, condition_on_positive)?;
    let q = assemble_q(&q0, &q1);
    Ok(MomentMatrices {
        q0,
        q1,
        q,
        cbar,
        n,
        condition_on_positive,
    })
}

/// Closed form of `Q_z` for `f(x) = (1, x)`, in terms of the design moments
/// `E[S^a (1 - S)^b]`. Valid for any real `c̄`.
pub fn q_linear_closed_form(cbar: f64, n: usize, design: &SaturationDesign, z: u8) -> DMatrix<f64> {
    let m = |a, b| design.moment(a, b);
    let inv = 1.0 / (n - 1) as f64;
    let (e00, e01, e11) = if z == 0 {
        (
            m(0, 1),
            cbar * m(1, 1),
            cbar * cbar * m(2, 1) + cbar * inv * m(1, 2),
        )
    } else {
        (
            m(1, 0),
            cbar * m(2, 0),
            cbar * cbar * m(3, 0) + cbar * inv * m(2, 1),
        )
    };
    DMatrix::from_row_slice(2, 2, &[e00, e01, e01, e11])
}

/// `Q_z*(c̄, n)`: exact on the lattice, linear interpolation between the
/// neighboring lattice points elsewhere.
pub fn q_extended(
    basis: &BasisSpec,
    cbar: f64,
    n: usize,
    design: &SaturationDesign,
    z: u8,
    condition_on_positive: bool,
) -> Result<DMatrix<f64>> {
    check_args(cbar, n)?;
    let d = effective_design(design, condition_on_positive)?;
    if let Some(trials) = lattice_trials(cbar, n) {
        return Ok(q_lattice(basis, trials, n, &d, z));
    }
    let x = (n - 1) as f64 * cbar;
    let lo = x.floor();
    let omega = x - lo;
    let q_lo = q_lattice(basis, lo as u64, n, &d, z);
    let q_hi = q_lattice(basis, lo as u64 + 1, n, &d, z);
    Ok(q_lo * (1.0 - omega) + q_hi * omega)
}

/// `Q` at an arbitrary `c̄`, assembled from the interpolated blocks.
pub fn q_extended_full(
    basis: &BasisSpec,
    cbar: f64,
    n: usize,
    design: &SaturationDesign,
    condition_on_positive: bool,
) -> Result<DMatrix<f64>> {
    let q0 = q_extended(basis, cbar, n, design, 0, condition_on_positive)?;
    let q1 = q_extended(basis, cbar, n, design, 1, condition_on_positive)?;
    Ok(assemble_q(&q0, &q1))
}

/// Large-group limit `E[S^z (1-S)^(1-z) f(c̄S) f(c̄S)']`.
pub fn q_limit(basis: &BasisSpec, cbar: f64, design: &SaturationDesign, z: u8) -> DMatrix<f64> {
    let k = basis.k();
    let mut q = DMatrix::zeros(k, k);
    for (s, w) in design.support() {
        let weight = w * if z == 1 { s } else { 1.0 - s };
        let f = nalgebra::DVector::from_vec(basis.eval(cbar * s));
        q += &f * f.transpose() * weight;
    }
    q
}

/// `[[Q0 + Q1, Q1], [Q1, Q1]]`.
pub fn assemble_q(q0: &DMatrix<f64>, q1: &DMatrix<f64>) -> DMatrix<f64> {
    let k = q0.nrows();
    let mut q = DMatrix::zeros(2 * k, 2 * k);
    q.view_mut((0, 0), (k, k)).copy_from(&(q0 + q1));
    q.view_mut((0, k), (k, k)).copy_from(q1);
    q.view_mut((k, 0), (k, k)).copy_from(q1);
    q.view_mut((k, k), (k, k)).copy_from(q1);
    q
}

/// Inverse of the stacked `Q` from the inverses of its blocks:
/// `[[Q0⁻¹, -Q0⁻¹], [-Q0⁻¹, Q0⁻¹ + Q1⁻¹]]`.
pub fn block_inverse(q0_inv: &DMatrix<f64>, q1_inv: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let k = q0_inv.nrows();
    if q0_inv.ncols() != k || q1_inv.nrows() != k || q1_inv.ncols() != k {
        return Err(Error::InvalidArgument(format!(
            "block shapes {:?} and {:?} do not match",
            q0_inv.shape(),
            q1_inv.shape()
        )));
    }
    let mut out = DMatrix::zeros(2 * k, 2 * k);
    out.view_mut((0, 0), (k, k)).copy_from(q0_inv);
    out.view_mut((0, k), (k, k)).copy_from(&(-q0_inv));
    out.view_mut((k, 0), (k, k)).copy_from(&(-q0_inv));
    out.view_mut((k, k), (k, k)).copy_from(&(q0_inv + q1_inv));
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PseudoInverse {
    pub matrix: DMatrix<f64>,
    pub rank: usize,
    /// Some eigenvalue was zeroed, i.e. the input was numerically singular.
    pub truncated: bool,
    pub determinant: f64,
}

/// Moore-Penrose inverse of a symmetric matrix via its eigendecomposition.
/// Eigenvalues with `|λ| <= 1e-12 · max(max|λ|, 1)` are treated as zero.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> Result<PseudoInverse> {
    if !m.is_square() {
        return Err(Error::InvalidArgument("pseudo-inverse needs a square matrix".into()));
    }
    let asym = (m - m.transpose()).abs().max();
    if asym > SYMMETRY_TOL {
        return Err(Error::InvalidArgument(format!(
            "matrix is not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    let eig = m.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(1.0);
    let tol = PINV_RTOL * scale;
    let n = m.nrows();
    let mut inv_vals = nalgebra::DVector::zeros(n);
    let mut rank = 0;
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l.abs() > tol {
            inv_vals[i] = 1.0 / l;
            rank += 1;
        }
    }
    let v = &eig.eigenvectors;
    let matrix = v * DMatrix::from_diagonal(&inv_vals) * v.transpose();
    Ok(PseudoInverse {
        matrix,
        rank,
        truncated: rank < n,
        determinant: eig.eigenvalues.iter().product(),
    })
}

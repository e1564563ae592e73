//! Linear IV and two-stage least squares with cluster-robust (CR0) variance.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Condition numbers at or above this are reported as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// One cluster's rows: instruments (`l` per row), regressors (`p` per row)
/// and outcomes, in a fixed order.
#[derive(Debug, Clone, Default)]
pub(crate) struct Block {
    pub id: u64,
    pub zhat: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

impl Block {
    pub fn new(id: u64) -> Self {
        Block {
            id,
            ..Block::default()
        }
    }

    pub fn push(&mut self, zhat: &[f64], x: &[f64], y: f64) {
        self.zhat.extend_from_slice(zhat);
        self.x.extend_from_slice(x);
        self.y.push(y);
    }

    pub fn rows(&self) -> usize {
        self.y.len()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct IvFit {
    pub coef: DVector<f64>,
    pub vcov: DMatrix<f64>,
    /// `(group id, ψ_g)` with `coef - plim ≈ Σ_g ψ_g`.
    pub influence: Vec<(u64, DVector<f64>)>,
    pub condition: f64,
    pub groups: usize,
    pub rows: usize,
}

pub(crate) fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

pub(crate) fn checked_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<(DMatrix<f64>, f64)> {
    let condition = condition_number(m);
    if condition.is_nan() || condition >= SINGULAR_CONDITION {
        return Err(Error::Singular { what, condition });
    }
    let inv = m
        .clone()
        .try_inverse()
        .ok_or(Error::Singular { what, condition })?;
    Ok((inv, condition))
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Solves `Σ Ẑ (Y - X'b) = 0`. With more instruments than regressors the
/// system is solved by 2SLS with weight `(Σ Ẑ Ẑ')⁻¹`.
pub(crate) fn solve(blocks: &[Block], l: usize, p: usize, small_sample: bool) -> Result<IvFit> {
    if l < p {
        return Err(Error::Unidentified(format!(
            "{l} instruments for {p} regressors"
        )));
    }
    let used: Vec<&Block> = blocks.iter().filter(|b| b.rows() > 0).collect();
    if used.len() < 2 {
        return Err(Error::Unidentified(format!(
            "{} contributing cluster(s); at least two required",
            used.len()
        )));
    }

    let mut szx = DMatrix::<f64>::zeros(l, p);
    let mut szy = DVector::<f64>::zeros(l);
    let mut szz = DMatrix::<f64>::zeros(l, l);
    for b in &used {
        for r in 0..b.rows() {
            let z = &b.zhat[r * l..(r + 1) * l];
            let x = &b.x[r * p..(r + 1) * p];
            for a in 0..l {
                for c in 0..p {
                    szx[(a, c)] += z[a] * x[c];
                }
                szy[a] += z[a] * b.y[r];
                if l > p {
                    for c in 0..l {
                        szz[(a, c)] += z[a] * z[c];
                    }
                }
            }
        }
    }

    let (h, condition) = if l == p {
        checked_inverse(&szx, "instrument-regressor cross-product")?
    } else {
        let (w, _) = checked_inverse(&szz, "instrument cross-product")?;
        let xzw = szx.transpose() * &w;
        let (m_inv, condition) = checked_inverse(&(&xzw * &szx), "two-stage least squares normal matrix")?;
        (m_inv * xzw, condition)
    };
    let coef = &h * &szy;

    let mut influence = Vec::with_capacity(used.len());
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for b in &used {
        let mut s = DVector::<f64>::zeros(l);
        for r in 0..b.rows() {
            let z = &b.zhat[r * l..(r + 1) * l];
            let x = &b.x[r * p..(r + 1) * p];
            let fitted: f64 = x.iter().zip(coef.iter()).map(|(a, c)| a * c).sum();
            let u = b.y[r] - fitted;
            for a in 0..l {
                s[a] += z[a] * u;
            }
        }
        let psi = &h * s;
        meat += &psi * psi.transpose();
        influence.push((b.id, psi));
    }
    let g = used.len() as f64;
    if small_sample {
        meat *= g / (g - 1.0);
    }
    Ok(IvFit {
        coef,
        vcov: symmetrize(&meat),
        influence,
        condition,
        groups: used.len(),
        rows: used.iter().map(|b| b.rows()).sum(),
    })
}

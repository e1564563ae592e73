//! The naive IV comparison regression and the take-up-by-saturation test.

use serde::{Deserialize, Serialize};

use super::instruments::canonical_order;
use super::solve::{checked_inverse, solve, Block};
use super::{Diagnostics, EstimateResult, Target};
use crate::dgp::ExperimentData;
use crate::error::{Error, Result};
use crate::model::BasisSpec;
use crate::stats::chi_square_sf;

/// IV regression of `Y` on `(1, D, D̄, D D̄)` instrumented by
/// `(1, Z, S, Z S)`, clustered by group.
pub fn naive_iv(data: &ExperimentData, small_sample: bool) -> Result<EstimateResult> {
    data.validate()?;
    let mut groups: Vec<_> = data.groups.iter().collect();
    groups.sort_by_key(|g| g.id);
    let mut blocks = Vec::with_capacity(groups.len());
    for g in groups {
        let dbar = g.dbar();
        let s = g.saturation;
        let mut block = Block::new(g.id);
        for i in canonical_order(g, None) {
            let z = f64::from(u8::from(g.z[i]));
            let d = f64::from(u8::from(g.d[i]));
            block.push(&[1.0, z, s, z * s], &[1.0, d, dbar[i], d * dbar[i]], g.y[i]);
        }
        blocks.push(block);
    }
    let fit = solve(&blocks, 4, 4, small_sample)?;
    let diagnostics = Diagnostics {
        pinv_count: 0,
        min_abs_det: None,
        condition_number: fit.condition,
        method: "iv".into(),
        pure_control: None,
        excluded_groups: 0,
        compliance_rate: None,
    };
    Ok(EstimateResult::from_fit(
        Target::Naive,
        Target::Naive.coefficient_names(&BasisSpec::linear()),
        fit,
        diagnostics,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TakeupBin {
    pub saturation: f64,
    pub offered: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IorTestResult {
    pub bins: Vec<TakeupBin>,
    pub wald: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Among offered individuals, regresses take-up on saturation-bin dummies
/// (the lowest offered bin is the reference) and Wald-tests that all dummy
/// coefficients are zero with a cluster-robust covariance. Under
/// individualistic offer response take-up does not vary with saturation.
pub fn ior_test(data: &ExperimentData) -> Result<IorTestResult> {
    data.validate()?;
    let mut sats: Vec<f64> = data
        .groups
        .iter()
        .filter(|g| g.z.iter().any(|&z| z))
        .map(|g| g.saturation)
        .collect();
    sats.sort_by(f64::total_cmp);
    sats.dedup();
    if sats.len() < 2 {
        return Err(Error::Unidentified(format!(
            "{} saturation bin(s) with offered individuals; the test needs two",
            sats.len()
        )));
    }
    let p = sats.len();
    let mut offered = vec![0usize; p];
    let mut treated = vec![0usize; p];

    let mut groups: Vec<_> = data.groups.iter().collect();
    groups.sort_by_key(|g| g.id);
    let mut blocks = Vec::with_capacity(groups.len());
    let mut x = vec![0.0; p];
    for g in groups {
        let Some(bin) = sats.iter().position(|&s| s == g.saturation) else {
            continue;
        };
        x.iter_mut().for_each(|v| *v = 0.0);
        x[0] = 1.0;
        if bin > 0 {
            x[bin] = 1.0;
        }
        let mut block = Block::new(g.id);
        for i in canonical_order(g, None) {
            if g.z[i] {
                offered[bin] += 1;
                treated[bin] += usize::from(g.d[i]);
                block.push(&x, &x, f64::from(u8::from(g.d[i])));
            }
        }
        blocks.push(block);
    }
    let fit = solve(&blocks, p, p, false)?;
    let b = fit.coef.rows(1, p - 1).into_owned();
    let v = fit.vcov.view((1, 1), (p - 1, p - 1)).into_owned();
    let (v_inv, _) = checked_inverse(&v, "take-up contrast covariance")?;
    let wald = (b.transpose() * v_inv * &b)[(0, 0)];
    let df = p - 1;
    Ok(IorTestResult {
        bins: sats
            .iter()
            .enumerate()
            .map(|(j, &s)| TakeupBin {
                saturation: s,
                offered: offered[j],
                rate: treated[j] as f64 / offered[j] as f64,
            })
            .collect(),
        wald,
        df,
        p_value: chi_square_sf(wald, df),
    })
}

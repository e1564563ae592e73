//! Instrument construction: `Ẑ = R(Ĉ, N)⁺ W` per estimator row.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};

use super::solve::Block;
use super::{ChatPolicy, EstimationOptions, PureControlPolicy, Target};
use crate::design::SaturationDesign;
use crate::dgp::{ExperimentData, Group};
use crate::error::{Error, Result};
use crate::model::BasisSpec;
use crate::moments::{pseudo_inverse, q_extended, q_extended_full};

/// Leave-one-out estimate of each member's neighbor complier share:
/// neighbors' take-up divided by neighbors' offers, or 0 when no neighbor
/// was offered.
pub fn estimate_chat(z: &[bool], d: &[bool]) -> Vec<f64> {
    let z_tot = z.iter().filter(|&&b| b).count();
    let d_tot = d.iter().filter(|&&b| b).count();
    z.iter()
        .zip(d)
        .map(|(&zi, &di)| {
            let zn = z_tot - usize::from(zi);
            let dn = d_tot - usize::from(di);
            if zn > 0 {
                dn as f64 / zn as f64
            } else {
                0.0
            }
        })
        .collect()
}

/// Which moment matrix normalizes the instrument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Moment {
    Full,
    Untreated,
    Treated,
}

struct CachedInverse {
    matrix: DMatrix<f64>,
    truncated: bool,
    abs_det: f64,
}

/// Memoizes `R(c̄, n)⁺`; within one data set only a handful of distinct
/// `(n, Ĉ)` pairs occur.
struct InverseCache<'a> {
    basis: &'a BasisSpec,
    design: &'a SaturationDesign,
    conditional: bool,
    map: HashMap<(Moment, usize, u64), CachedInverse>,
}

impl<'a> InverseCache<'a> {
    fn get(&mut self, moment: Moment, n: usize, cbar: f64) -> Result<&CachedInverse> {
        let key = (moment, n, cbar.to_bits());
        if !self.map.contains_key(&key) {
            let r = match moment {
                Moment::Full => q_extended_full(self.basis, cbar, n, self.design, self.conditional)?,
                Moment::Untreated => q_extended(self.basis, cbar, n, self.design, 0, self.conditional)?,
                Moment::Treated => q_extended(self.basis, cbar, n, self.design, 1, self.conditional)?,
            };
            let pinv = pseudo_inverse(&r)?;
            self.map.insert(
                key,
                CachedInverse {
                    matrix: pinv.matrix,
                    truncated: pinv.truncated,
                    abs_det: pinv.determinant.abs(),
                },
            );
        }
        Ok(&self.map[&key])
    }
}

/// Instruments, regressors and outcomes grouped by cluster, ready for the
/// IV solver.
#[derive(Debug, Clone)]
pub struct InstrumentSet {
    pub(crate) blocks: Vec<Block>,
    /// Instruments per row.
    pub l: usize,
    /// Regressors per row.
    pub p: usize,
    /// Individuals whose moment matrix was rank-deficient.
    pub pinv_count: usize,
    pub min_abs_det: Option<f64>,
    /// Pure-control groups left out of the moment sums.
    pub excluded_groups: usize,
    /// Pure-control groups entering through the extra indicator instrument.
    pub pure_control_groups: usize,
    pub conditional_moments: bool,
}

/// Canonical within-group order, so that permuting rows cannot change any
/// floating-point sum.
pub(crate) fn canonical_order(g: &Group, key: Option<&[f64]>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..g.len()).collect();
    idx.sort_by(|&a, &b| {
        (g.z[a], g.d[a])
            .cmp(&(g.z[b], g.d[b]))
            .then(g.y[a].total_cmp(&g.y[b]))
            .then_with(|| match key {
                Some(k) => k[a].total_cmp(&k[b]),
                None => std::cmp::Ordering::Equal,
            })
    });
    idx
}

fn sorted_groups(data: &ExperimentData) -> Vec<&Group> {
    let mut groups: Vec<&Group> = data.groups.iter().collect();
    groups.sort_by_key(|g| g.id);
    groups
}

pub(crate) fn check_data_against_design(data: &ExperimentData, design: &SaturationDesign) -> Result<()> {
    data.validate()?;
    if data.groups.is_empty() {
        return Err(Error::InvalidDataset("no groups".into()));
    }
    if let Some(g) = data.groups.iter().find(|g| !design.contains(g.saturation)) {
        return Err(Error::InvalidDataset(format!(
            "group {} has saturation {} outside the design support",
            g.id, g.saturation
        )));
    }
    if design.interior_count() == 0 {
        return Err(Error::InvalidDesign(
            "no interior saturation; spillover parameters are not identified".into(),
        ));
    }
    Ok(())
}

/// Builds `(Ẑ, X, Y)` for one of the four transformed-instrument targets.
///
/// | target            | X          | R  | W            |
/// |-------------------|------------|----|--------------|
/// | joint             | `[f; D f]` | Q  | `[f; Z f]`   |
/// | complier ψ        | `f`        | Q1 | `D f`        |
/// | never-taker θ     | `f`        | Q1 | `Z (1-D) f`  |
/// | population θ      | `f`        | Q0 | `(1-Z) f`    |
///
/// When the design has a pure-control arm, moment matrices are conditional
/// on `S > 0`. Pure-control groups then either drop out or, for the joint
/// and population targets under [`PureControlPolicy::Gmm`], contribute
/// through an extra instrument `1{S = 0}`.
pub fn build_instruments(
    data: &ExperimentData,
    design: &SaturationDesign,
    target: Target,
    opts: &EstimationOptions,
) -> Result<InstrumentSet> {
    let (moment, joint) = match target {
        Target::Joint => (Moment::Full, true),
        Target::ComplierPsi | Target::NeverTakerTheta => (Moment::Treated, false),
        Target::PopulationTheta => (Moment::Untreated, false),
        other => {
            return Err(Error::InvalidArgument(format!(
                "{other} has no transformed-instrument row"
            )))
        }
    };
    check_data_against_design(data, design)?;
    if opts.chat == ChatPolicy::Latent && !data.has_latent() {
        return Err(Error::InvalidArgument(
            "true neighbor complier shares requested but data carries no latent truth".into(),
        ));
    }

    let basis = &opts.basis;
    let k = basis.k();
    let conditional = design.has_pure_control();
    let has_pc_data = data.groups.iter().any(Group::is_pure_control);
    let augment = has_pc_data
        && matches!(target, Target::Joint | Target::PopulationTheta)
        && opts.pure_control.unwrap_or(PureControlPolicy::Gmm) == PureControlPolicy::Gmm;
    let l0 = if joint { 2 * k } else { k };
    let l = l0 + usize::from(augment);
    let p = l0;

    let mut cache = InverseCache {
        basis,
        design,
        conditional,
        map: HashMap::new(),
    };
    let mut set = InstrumentSet {
        blocks: Vec::with_capacity(data.groups.len()),
        l,
        p,
        pinv_count: 0,
        min_abs_det: None,
        excluded_groups: 0,
        pure_control_groups: 0,
        conditional_moments: conditional,
    };

    let mut f = vec![0.0; k];
    let mut w = DVector::<f64>::zeros(l0);
    let mut zhat = vec![0.0; l];
    let mut x = vec![0.0; p];
    for g in sorted_groups(data) {
        let n = g.len();
        let dbar = g.dbar();
        let latent_cbar = match opts.chat {
            ChatPolicy::Latent => g.true_cbar(),
            ChatPolicy::Estimated => None,
        };
        let order = canonical_order(g, latent_cbar.as_deref());
        let mut block = crate::estimator::solve::Block::new(g.id);

        if g.is_pure_control() {
            if !augment {
                set.excluded_groups += 1;
                continue;
            }
            set.pure_control_groups += 1;
            zhat.iter_mut().for_each(|v| *v = 0.0);
            zhat[l0] = 1.0;
            for &i in &order {
                basis.eval_into(dbar[i], &mut f);
                fill_regressors(&mut x, &f, false, joint);
                block.push(&zhat, &x, g.y[i]);
            }
            set.blocks.push(block);
            continue;
        }

        let chat = match latent_cbar {
            Some(c) => c,
            None => estimate_chat(&g.z, &g.d),
        };
        for &i in &order {
            let (zi, di) = (f64::from(u8::from(g.z[i])), f64::from(u8::from(g.d[i])));
            let scale = match target {
                Target::ComplierPsi => di,
                Target::NeverTakerTheta => zi * (1.0 - di),
                Target::PopulationTheta => 1.0 - zi,
                _ => 1.0,
            };
            if scale == 0.0 {
                continue;
            }
            basis.eval_into(dbar[i], &mut f);
            for j in 0..k {
                w[j] = f[j] * scale;
                if joint {
                    w[k + j] = f[j] * zi;
                }
            }
            let inv = cache.get(moment, n, chat[i])?;
            if inv.truncated {
                set.pinv_count += 1;
            }
            set.min_abs_det = Some(set.min_abs_det.map_or(inv.abs_det, |m| m.min(inv.abs_det)));
            let zt = &inv.matrix * &w;
            zhat[..l0].copy_from_slice(zt.as_slice());
            if augment {
                zhat[l0] = 0.0;
            }
            if zhat.iter().all(|v| *v == 0.0) {
                continue;
            }
            fill_regressors(&mut x, &f, g.d[i], joint);
            block.push(&zhat, &x, g.y[i]);
        }
        set.blocks.push(block);
    }
    Ok(set)
}

fn fill_regressors(x: &mut [f64], f: &[f64], d: bool, joint: bool) {
    let k = f.len();
    x[..k].copy_from_slice(f);
    if joint {
        for j in 0..k {
            x[k + j] = if d { f[j] } else { 0.0 };
        }
    }
}

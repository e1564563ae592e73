//! Simulation data-generating process.
//!
//! Each group draws a complier share `c̄_g` from a finite support and
//! receives exactly `n c̄_g` compliers at random positions. Offers follow the
//! saturation design, take-up is `d = c z`, and every individual's linear
//! coefficients `(α, β, γ, δ)` are correlated with the leave-one-out share of
//! compliers among her neighbors:
//!
//! ```text
//! coef = mean + [ (C̄ - E c̄) / sd(c̄) · κ/√(κ²+1) + u/√(κ²+1) ] σ,   u ~ N(0, 1)
//! ```
//!
//! Outcomes carry no noise beyond this coefficient heterogeneity.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::design::{assign_offers, Allocation, SaturationDesign};
use crate::error::{Error, Result};
use crate::model::{MeanCoefficients, Subpopulation};
use crate::rng::SeedStream;

/// Names of the linear-model coefficients, in storage order.
pub const COEF_NAMES: [&str; 4] = ["alpha", "beta", "gamma", "delta"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(alias = "G")]
    pub groups: usize,
    #[serde(alias = "n")]
    pub group_size: usize,
    pub design: SaturationDesign,
    pub complier_shares: Vec<f64>,
    /// Probabilities over `complier_shares`; uniform when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complier_share_probs: Option<Vec<f64>>,
    /// Unconditional means of `(α, β, γ, δ)`.
    pub means: [f64; 4],
    pub kappa: [f64; 4],
    pub sigma: [f64; 4],
    pub seed: u64,
}

impl SimConfig {
    /// Groups of 116, five equally allocated saturations
    /// `{0, 0.25, 0.5, 0.75, 1}`, complier shares uniform on
    /// `{0.1, ..., 0.5}`, means `(0.5, 0.2, -0.7, 0.8)`,
    /// `κ = (0, 0, 1.2, 1.5)`, `σ = (0.3, 0.3, 0.2, 0.4)`.
    pub fn benchmark(groups: usize, seed: u64) -> Self {
        SimConfig {
            groups,
            group_size: 116,
            design: SaturationDesign::balanced(vec![0.0, 0.25, 0.5, 0.75, 1.0], groups as u64)
                .expect("benchmark design is valid"),
            complier_shares: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            complier_share_probs: None,
            means: [0.5, 0.2, -0.7, 0.8],
            kappa: [0.0, 0.0, 1.2, 1.5],
            sigma: [0.3, 0.3, 0.2, 0.4],
            seed,
        }
    }

    pub fn share_probs(&self) -> Vec<f64> {
        self.complier_share_probs.clone().unwrap_or_else(|| {
            let k = self.complier_shares.len() as f64;
            vec![1.0 / k; self.complier_shares.len()]
        })
    }

    /// Mean and standard deviation of the group complier-share distribution.
    pub fn share_moments(&self) -> (f64, f64) {
        let p = self.share_probs();
        let mean: f64 = self.complier_shares.iter().zip(&p).map(|(c, w)| c * w).sum();
        let var: f64 = self
            .complier_shares
            .iter()
            .zip(&p)
            .map(|(c, w)| w * (c - mean).powi(2))
            .sum();
        (mean, var.sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.groups == 0 {
            return bad("need at least one group".into());
        }
        if self.group_size < 2 {
            return bad(format!("group size {} < 2", self.group_size));
        }
        if let Allocation::Counts(c) = self.design.allocation() {
            if c.iter().sum::<u64>() != self.groups as u64 {
                return bad(format!(
                    "design counts sum to {} but G = {}",
                    c.iter().sum::<u64>(),
                    self.groups
                ));
            }
        }
        if self.complier_shares.is_empty() {
            return bad("complier_shares is empty".into());
        }
        if let Some(c) = self.complier_shares.iter().find(|c| !(0.0..=1.0).contains(*c)) {
            return bad(format!("complier share {c} outside [0, 1]"));
        }
        let p = self.share_probs();
        if p.len() != self.complier_shares.len()
            || p.iter().any(|w| *w < 0.0)
            || (p.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return bad("complier_share_probs must be a probability vector over complier_shares".into());
        }
        if self.sigma.iter().any(|s| *s < 0.0 || !s.is_finite()) {
            return bad("sigma entries must be nonnegative".into());
        }
        let (_, sd) = self.share_moments();
        if sd == 0.0 && self.kappa.iter().zip(&self.sigma).any(|(k, s)| *k != 0.0 && *s != 0.0) {
            return bad("nonzero kappa needs a nondegenerate complier-share distribution".into());
        }
        Ok(())
    }
}

/// Draws one random coefficient correlated with the standardized neighbor
/// complier share.
pub fn draw_coefficient<R: Rng + ?Sized>(
    mean: f64,
    kappa: f64,
    sigma: f64,
    cbar: f64,
    share_moments: (f64, f64),
    rng: &mut R,
) -> Result<f64> {
    let u: f64 = rng.sample(StandardNormal);
    coefficient_from_normal(mean, kappa, sigma, cbar, share_moments, u)
}

fn coefficient_from_normal(
    mean: f64,
    kappa: f64,
    sigma: f64,
    cbar: f64,
    (mu, sd): (f64, f64),
    u: f64,
) -> Result<f64> {
    if sigma == 0.0 {
        return Ok(mean);
    }
    let norm = (kappa * kappa + 1.0).sqrt();
    let standardized = if kappa == 0.0 {
        0.0
    } else if sd > 0.0 {
        (cbar - mu) / sd
    } else {
        return Err(Error::InvalidArgument(
            "complier-share sd is zero but kappa is not".into(),
        ));
    };
    Ok(mean + (standardized * kappa / norm + u / norm) * sigma)
}

/// Per-individual truth kept alongside simulated data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub complier: bool,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub id: u64,
    pub saturation: f64,
    pub z: Vec<bool>,
    pub d: Vec<bool>,
    pub y: Vec<f64>,
    pub latent: Option<Vec<Latent>>,
}

impl Group {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn is_pure_control(&self) -> bool {
        self.saturation == 0.0
    }

    /// Leave-one-out take-up share `D̄_i`.
    pub fn dbar(&self) -> Vec<f64> {
        let total = self.d.iter().filter(|&&b| b).count() as f64;
        let denom = (self.len() - 1) as f64;
        self.d
            .iter()
            .map(|&d| (total - f64::from(u8::from(d))) / denom)
            .collect()
    }

    /// Leave-one-out complier share `C̄_i`, if the latent truth is known.
    pub fn true_cbar(&self) -> Option<Vec<f64>> {
        let latent = self.latent.as_ref()?;
        let total = latent.iter().filter(|l| l.complier).count() as f64;
        let denom = (self.len() - 1) as f64;
        Some(
            latent
                .iter()
                .map(|l| (total - f64::from(u8::from(l.complier))) / denom)
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentData {
    pub groups: Vec<Group>,
}

impl ExperimentData {
    pub fn individuals(&self) -> usize {
        self.groups.iter().map(Group::len).sum()
    }

    pub fn has_latent(&self) -> bool {
        !self.groups.is_empty() && self.groups.iter().all(|g| g.latent.is_some())
    }

    pub fn without_latent(&self) -> Self {
        ExperimentData {
            groups: self
                .groups
                .iter()
                .map(|g| Group {
                    latent: None,
                    ..g.clone()
                })
                .collect(),
        }
    }

    /// Checks group sizes, vector lengths and one-sided non-compliance.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for g in &self.groups {
            let fail = |m: String| Err(Error::InvalidDataset(format!("group {}: {m}", g.id)));
            if !seen.insert(g.id) {
                return fail("duplicate group id".into());
            }
            if g.len() < 2 {
                return fail(format!("has {} member(s); at least two required", g.len()));
            }
            if g.d.len() != g.len() || g.y.len() != g.len() {
                return fail("z, d and y lengths differ".into());
            }
            if !(0.0..=1.0).contains(&g.saturation) {
                return fail(format!("saturation {} outside [0, 1]", g.saturation));
            }
            if let Some(i) = (0..g.len()).find(|&i| g.d[i] && !g.z[i]) {
                return fail(format!(
                    "member {i} takes up treatment without an offer (one-sided non-compliance violated)"
                ));
            }
        }
        Ok(())
    }
}

fn draw_share<R: Rng + ?Sized>(shares: &[f64], probs: &[f64], rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, p) in shares.iter().zip(probs) {
        acc += p;
        if u < acc {
            return *c;
        }
    }
    shares[shares.len() - 1]
}

/// Number of compliers in a group of `n` with nominal share `c̄`. When `n c̄`
/// is not an integer the count is rounded to the nearest one.
pub fn complier_count(n: usize, share: f64) -> usize {
    (share * n as f64).round() as usize
}

/// Draws complier flags with exactly `round(n c̄)` compliers at random positions.
fn draw_compliers<R: Rng + ?Sized>(n: usize, share: f64, rng: &mut R) -> Vec<bool> {
    let count = complier_count(n, share);
    let mut flags: Vec<bool> = (0..n).map(|i| i < count).collect();
    flags.shuffle(rng);
    flags
}

/// Simulates a full experiment. Group `g` draws only from the stream
/// `(seed, 1, g)`, so output is independent of evaluation order.
pub fn simulate_experiment(cfg: &SimConfig) -> Result<ExperimentData> {
    simulate_from_stream(cfg, SeedStream::root(cfg.seed))
}

/// As [`simulate_experiment`] but rooted at an arbitrary stream; `cfg.seed`
/// is ignored.
pub fn simulate_from_stream(cfg: &SimConfig, root: SeedStream) -> Result<ExperimentData> {
    cfg.validate()?;
    let saturations = cfg
        .design
        .sample_saturations(cfg.groups, &mut root.child(0).rng())?;
    let probs = cfg.share_probs();
    let moments = cfg.share_moments();
    let n = cfg.group_size;
    let denom = (n - 1) as f64;

    let groups = saturations
        .iter()
        .enumerate()
        .map(|(g, &s)| {
            let mut rng = root.path(&[1, g as u64]).rng();
            let share = draw_share(&cfg.complier_shares, &probs, &mut rng);
            let compliers = draw_compliers(n, share, &mut rng);
            let z = assign_offers(n, s, &mut rng)?;
            let d: Vec<bool> = compliers.iter().zip(&z).map(|(&c, &z)| c && z).collect();
            let n_compliers = compliers.iter().filter(|&&c| c).count() as f64;
            let n_treated = d.iter().filter(|&&b| b).count() as f64;

            let mut latent = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let c = f64::from(u8::from(compliers[i]));
                let cbar = (n_compliers - c) / denom;
                let mut coef = [0.0; 4];
                for (j, slot) in coef.iter_mut().enumerate() {
                    *slot = draw_coefficient(cfg.means[j], cfg.kappa[j], cfg.sigma[j], cbar, moments, &mut rng)?;
                }
                let [alpha, beta, gamma, delta] = coef;
                let di = f64::from(u8::from(d[i]));
                let dbar = (n_treated - di) / denom;
                y.push(alpha + beta * di + gamma * dbar + delta * di * dbar);
                latent.push(Latent {
                    complier: compliers[i],
                    alpha,
                    beta,
                    gamma,
                    delta,
                });
            }
            Ok(Group {
                id: g as u64,
                saturation: s,
                z,
                d,
                y,
                latent: Some(latent),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentData { groups })
}

/// Brute-force sub-population means of `(α, β, γ, δ)` and the probability
/// limits of the naive IV regression, computed by simulating individuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTruth {
    pub population: [f64; 4],
    pub complier: Option<[f64; 4]>,
    pub never_taker: Option<[f64; 4]>,
    /// `(E α, E[Cβ]/E C, E[C̄γ]/E C̄, E[C C̄ δ]/E[C C̄])`.
    pub naive: Option<[f64; 4]>,
    pub compliance_rate: f64,
    pub draws: usize,
}

impl OracleTruth {
    /// Linear-basis mean coefficients for a label: `θ = (α, γ)` and, except
    /// for never-takers, the contrast `(β, δ)`.
    pub fn mean_coefficients(&self, label: Subpopulation) -> Option<MeanCoefficients> {
        let m = match label {
            Subpopulation::Population => self.population,
            Subpopulation::Complier => self.complier?,
            Subpopulation::NeverTaker => self.never_taker?,
        };
        let contrast = (label != Subpopulation::NeverTaker).then(|| vec![m[1], m[3]]);
        MeanCoefficients::new(label, Some(vec![m[0], m[2]]), contrast).ok()
    }
}

pub const MIN_ORACLE_DRAWS: usize = 100_000;

/// Simulates at least `n_draws` individuals (whole groups) from the DGP and
/// averages their coefficients by compliance type.
pub fn oracle_subpopulation_means(cfg: &SimConfig, n_draws: usize) -> Result<OracleTruth> {
    cfg.validate()?;
    if n_draws < MIN_ORACLE_DRAWS {
        return Err(Error::InvalidArgument(format!(
            "oracle needs at least {MIN_ORACLE_DRAWS} draws, got {n_draws}"
        )));
    }
    let root = SeedStream::root(cfg.seed).child(u64::MAX);
    let n = cfg.group_size;
    let denom = (n - 1) as f64;
    let probs = cfg.share_probs();
    let moments = cfg.share_moments();
    let groups = n_draws.div_ceil(n);

    let mut sum = [[0.0f64; 4]; 3]; // population, complier, never-taker
    let mut count = [0usize; 3];
    let (mut s_c_beta, mut s_cbar, mut s_cbar_gamma, mut s_ccbar, mut s_ccbar_delta) =
        (0.0, 0.0, 0.0, 0.0, 0.0);
    for g in 0..groups {
        let mut rng = root.child(g as u64).rng();
        let share = draw_share(&cfg.complier_shares, &probs, &mut rng);
        let compliers = draw_compliers(n, share, &mut rng);
        let n_compliers = compliers.iter().filter(|&&c| c).count() as f64;
        for &is_c in &compliers {
            let c = f64::from(u8::from(is_c));
            let cbar = (n_compliers - c) / denom;
            let mut coef = [0.0; 4];
            for (j, slot) in coef.iter_mut().enumerate() {
                *slot = draw_coefficient(cfg.means[j], cfg.kappa[j], cfg.sigma[j], cbar, moments, &mut rng)?;
            }
            let bucket = if is_c { 1 } else { 2 };
            for j in 0..4 {
                sum[0][j] += coef[j];
                sum[bucket][j] += coef[j];
            }
            count[0] += 1;
            count[bucket] += 1;
            s_c_beta += c * coef[1];
            s_cbar += cbar;
            s_cbar_gamma += cbar * coef[2];
            s_ccbar += c * cbar;
            s_ccbar_delta += c * cbar * coef[3];
        }
    }
    let avg = |b: usize| -> Option<[f64; 4]> {
        (count[b] > 0).then(|| sum[b].map(|s| s / count[b] as f64))
    };
    let population = avg(0).expect("at least one draw");
    let n_c = count[1] as f64;
    let naive = (n_c > 0.0 && s_cbar > 0.0 && s_ccbar > 0.0).then(|| {
        [
            population[0],
            s_c_beta / n_c,
            s_cbar_gamma / s_cbar,
            s_ccbar_delta / s_ccbar,
        ]
    });
    Ok(OracleTruth {
        population,
        complier: avg(1),
        never_taker: avg(2),
        naive,
        compliance_rate: n_c / count[0] as f64,
        draws: count[0],
    })
}

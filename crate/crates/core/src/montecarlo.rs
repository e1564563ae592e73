//! Monte Carlo harness: repeated simulate-then-estimate runs summarised by
//! mean, standard deviation and 95% coverage of each parameter against
//! brute-force oracle truths.
//!
//! Replication `r` simulates from the seed stream `(seed, r)` and results are
//! collected in replication order, so reports do not depend on the number of
//! worker threads.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dgp::{oracle_subpopulation_means, simulate_from_stream, OracleTruth, SimConfig};
use crate::error::{Error, Result};
use crate::estimator::{
    complier_theta_estimate, naive_iv, rsiv_estimate, EstimateResult, EstimationOptions, PureControlPolicy, Target,
};
use crate::rng::SeedStream;
use crate::stats::{mean_sd, Z_95};

pub const DEFAULT_ORACLE_DRAWS: usize = 1_000_000;

/// Joint, never-taker, complier `θ` and naive IV: the eight transformed-IV
/// parameters plus the four naive counterparts.
pub const DEFAULT_ESTIMATORS: [Target; 4] = [
    Target::Joint,
    Target::NeverTakerTheta,
    Target::ComplierTheta,
    Target::Naive,
];

#[derive(Debug, Clone)]
pub struct McOptions {
    pub reps: usize,
    pub jobs: usize,
    pub estimators: Vec<Target>,
    pub estimation: EstimationOptions,
    pub oracle_draws: usize,
    pub record_runtime: bool,
}

impl McOptions {
    pub fn new(reps: usize, jobs: usize) -> Self {
        McOptions {
            reps,
            jobs,
            estimators: DEFAULT_ESTIMATORS.to_vec(),
            estimation: EstimationOptions::default(),
            oracle_draws: DEFAULT_ORACLE_DRAWS,
            record_runtime: true,
        }
    }
}

/// Settings echoed into the report so a run can be repeated exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEcho {
    pub sim: SimConfig,
    pub reps: usize,
    pub estimators: Vec<Target>,
    pub basis: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pure_control: Option<PureControlPolicy>,
    pub small_sample: bool,
    pub oracle_draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRow {
    pub target: Target,
    pub name: String,
    /// Value the confidence intervals are checked against: the structural
    /// mean, also for the naive rows.
    pub truth: Option<f64>,
    /// Probability limit of the naive regression, where it differs from the
    /// structural mean.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimand: Option<f64>,
    pub mean: f64,
    pub sd: f64,
    /// `None` when the estimates have no spread or no truth is available.
    pub coverage: Option<f64>,
    pub replications: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub rows: Vec<McRow>,
    pub oracle: OracleTruth,
    pub config: McEcho,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtime_secs: Option<f64>,
    /// Per-replication estimates, in replication order.
    #[serde(skip)]
    pub replications: Vec<Replication>,
}

impl McReport {
    pub fn row(&self, target: Target, name: &str) -> Option<&McRow> {
        self.rows.iter().find(|r| r.target == target && r.name == name)
    }
}

/// One target's outcome in one replication; `None` when the system was singular.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDraw {
    pub target: Target,
    pub estimate: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub index: usize,
    pub draws: Vec<TargetDraw>,
}

fn excluded_on_singular(res: Result<EstimateResult>) -> Result<Option<EstimateResult>> {
    match res {
        Ok(r) => Ok(Some(r)),
        Err(e) if e.is_numerical() => Ok(None),
        Err(e) => Err(e),
    }
}

fn run_replication(cfg: &SimConfig, opts: &McOptions, index: usize) -> Result<Replication> {
    let stream = SeedStream::root(cfg.seed).child(index as u64);
    let data = simulate_from_stream(cfg, stream)?;
    let est = &opts.estimation;
    let needs = |t: Target| opts.estimators.contains(&t) || opts.estimators.contains(&Target::ComplierTheta);
    let pop = if needs(Target::PopulationTheta) {
        excluded_on_singular(rsiv_estimate(&data, &cfg.design, Target::PopulationTheta, est))?
    } else {
        None
    };
    let nt = if needs(Target::NeverTakerTheta) {
        excluded_on_singular(rsiv_estimate(&data, &cfg.design, Target::NeverTakerTheta, est))?
    } else {
        None
    };

    let mut draws = Vec::with_capacity(opts.estimators.len());
    for &target in &opts.estimators {
        let res = match target {
            Target::PopulationTheta => pop.clone(),
            Target::NeverTakerTheta => nt.clone(),
            Target::ComplierTheta => match (&pop, &nt) {
                (Some(p), Some(n)) => excluded_on_singular(complier_theta_estimate(&data, p, n, est))?,
                _ => None,
            },
            Target::Naive => excluded_on_singular(naive_iv(&data, est.small_sample))?,
            Target::Joint | Target::ComplierPsi => excluded_on_singular(rsiv_estimate(&data, &cfg.design, target, est))?,
        };
        draws.push(TargetDraw {
            target,
            estimate: res.map(|r| (r.coefficients, r.se)),
        });
    }
    Ok(Replication { index, draws })
}

/// Structural truth and, for the naive rows, the regression's probability
/// limit, for coefficient `j` of a linear-basis target.
fn truth_for(oracle: &OracleTruth, target: Target, j: usize) -> (Option<f64>, Option<f64>) {
    let pop = Some(oracle.population);
    let pick = |m: Option<[f64; 4]>, k: usize| m.map(|m| m[k]);
    match target {
        Target::Joint => match j {
            0 => (pick(pop, 0), None),
            1 => (pick(pop, 2), None),
            2 => (pick(oracle.complier, 1), None),
            _ => (pick(oracle.complier, 3), None),
        },
        Target::PopulationTheta => (pick(pop, [0, 2][j]), None),
        Target::NeverTakerTheta => (pick(oracle.never_taker, [0, 2][j]), None),
        Target::ComplierTheta => (pick(oracle.complier, [0, 2][j]), None),
        Target::ComplierPsi => {
            let c = oracle.complier;
            (c.map(|m| if j == 0 { m[0] + m[1] } else { m[2] + m[3] }), None)
        }
        Target::Naive => {
            let structural = match j {
                0 => pick(pop, 0),
                1 => pick(oracle.complier, 1),
                2 => pick(pop, 2),
                _ => pick(oracle.complier, 3),
            };
            (structural, pick(oracle.naive, j))
        }
    }
}

fn summarise(reps: &[Replication], oracle: &OracleTruth, opts: &McOptions) -> Vec<McRow> {
    let mut rows = Vec::new();
    for (t, &target) in opts.estimators.iter().enumerate() {
        let names = target.coefficient_names(&opts.estimation.basis);
        let kept: Vec<&(Vec<f64>, Vec<f64>)> = reps.iter().filter_map(|r| r.draws[t].estimate.as_ref()).collect();
        for (j, name) in names.into_iter().enumerate() {
            let (truth, estimand) = if opts.estimation.basis.is_linear() {
                truth_for(oracle, target, j)
            } else {
                (None, None)
            };
            let values: Vec<f64> = kept.iter().map(|(c, _)| c[j]).collect();
            let (mean, sd) = mean_sd(&values);
            let scale = 1.0 + truth.unwrap_or(mean).abs();
            let coverage = truth.filter(|_| sd > 1e-9 * scale && !values.is_empty()).map(|truth| {
                let hits = kept.iter().filter(|(c, s)| (c[j] - truth).abs() <= Z_95 * s[j]).count();
                hits as f64 / kept.len() as f64
            });
            rows.push(McRow {
                target,
                name,
                truth,
                estimand,
                mean,
                sd,
                coverage,
                replications: kept.len(),
                excluded: reps.len() - kept.len(),
            });
        }
    }
    rows
}

/// Runs `f(0), ..., f(reps - 1)` on `jobs` worker threads and returns the
/// results in index order.
pub fn par_replicate<T, F>(reps: usize, jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if jobs == 0 {
        return Err(Error::InvalidArgument("jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| (0..reps).into_par_iter().map(f).collect())
}

pub fn run_mc(cfg: &SimConfig, opts: &McOptions) -> Result<McReport> {
    let start = Instant::now();
    cfg.validate()?;
    if opts.reps < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 replications, got {}", opts.reps)));
    }
    if opts.jobs == 0 {
        return Err(Error::InvalidArgument("jobs must be at least 1".into()));
    }
    if opts.estimators.is_empty() {
        return Err(Error::InvalidArgument("no estimators selected".into()));
    }
    if opts.estimators.contains(&Target::Naive) && !opts.estimation.basis.is_linear() {
        return Err(Error::InvalidArgument(
            "the naive comparison regression is defined for the linear basis only".into(),
        ));
    }
    let oracle = oracle_subpopulation_means(cfg, opts.oracle_draws)?;
    let replications = par_replicate(opts.reps, opts.jobs, |r| run_replication(cfg, opts, r))?;
    let rows = summarise(&replications, &oracle, opts);
    Ok(McReport {
        rows,
        oracle,
        config: McEcho {
            sim: cfg.clone(),
            reps: opts.reps,
            estimators: opts.estimators.clone(),
            basis: opts.estimation.basis.name().to_string(),
            pure_control: opts.estimation.pure_control,
            small_sample: opts.estimation.small_sample,
            oracle_draws: opts.oracle_draws,
        },
        runtime_secs: opts.record_runtime.then(|| start.elapsed().as_secs_f64()),
        replications,
    })
}

pub const REPLICATIONS_HEADER: [&str; 5] = ["replication", "target", "parameter", "estimate", "se"];

/// Long-format per-replication estimates; singular fits are written as `NA`.
pub fn write_replications_csv<W: Write>(report: &McReport, writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(REPLICATIONS_HEADER)?;
    let basis = crate::model::BasisSpec::from_name(&report.config.basis)?;
    for rep in &report.replications {
        for draw in &rep.draws {
            for (j, name) in draw.target.coefficient_names(&basis).iter().enumerate() {
                let (est, se) = match &draw.estimate {
                    Some((c, s)) => (c[j].to_string(), s[j].to_string()),
                    None => ("NA".to_string(), "NA".to_string()),
                };
                w.write_record([rep.index.to_string(), draw.target.to_string(), name.clone(), est, se])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

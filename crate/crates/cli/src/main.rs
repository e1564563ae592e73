//! `sativ`: simulate, estimate and evaluate randomized saturation experiments.

mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sativ_core::design::{validate_design, DEFAULT_WEAK_THRESHOLD};
use sativ_core::dgp::simulate_experiment;
use sativ_core::effects::{default_grid, effect_curve, write_effects_csv, EffectInputs, EffectKind, DEFAULT_DELTA};
use sativ_core::estimator::{estimate, ior_test};
use sativ_core::io::{ingest_csv, write_data, write_latent};
use sativ_core::montecarlo::{run_mc, write_replications_csv, McOptions, DEFAULT_ESTIMATORS};
use sativ_core::{BasisSpec, Error, EstimationOptions, PureControlPolicy, Result, Target};

use config::AppConfig;

#[derive(Debug, Parser)]
#[command(name = "sativ", version, about = "Randomized saturation experiments with one-sided non-compliance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate an experiment and write it as CSV.
    Simulate(SimulateArgs),
    /// Estimate one target from a data CSV.
    Estimate(EstimateArgs),
    /// Effect curves with pointwise 95% bands, as CSV.
    Effects(EffectsArgs),
    /// Monte Carlo study of the estimators.
    Montecarlo(MontecarloArgs),
    /// Test that take-up does not depend on the saturation.
    IorTest(IorArgs),
    /// Check that a design identifies the model.
    ValidateDesign(ValidateArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Configuration with `design` and `sim` blocks.
    #[arg(long)]
    config: PathBuf,
    /// Data CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write latent types and coefficients to this CSV.
    #[arg(long)]
    latent: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct EstimationFlags {
    /// Configuration holding a `design` block, or a bare design object.
    #[arg(long)]
    design: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Basis for the spillover functions (linear, quadratic).
    #[arg(long)]
    basis: Option<String>,
    #[arg(long, value_parser = parse_policy)]
    pure_control: Option<PureControlPolicy>,
    /// Scale the cluster covariance by G/(G-1).
    #[arg(long)]
    small_sample: bool,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: EstimationFlags,
    /// joint, complier-psi, never-taker, population, complier-theta or naive.
    #[arg(long, value_parser = parse_target)]
    target: Option<Target>,
    /// Result JSON; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EffectsArgs {
    #[command(flatten)]
    common: EstimationFlags,
    /// Comma-separated kinds such as DE_treated,IE0_population. All
    /// identified curves when omitted.
    #[arg(long, value_delimiter = ',', value_parser = parse_kind)]
    kinds: Vec<EffectKind>,
    /// Increment of the neighbor take-up share for indirect effects.
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    /// Effects CSV; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MontecarloArgs {
    /// Configuration with `design` and `sim` blocks.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Report JSON; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-replication estimates CSV. Defaults to `<out>.replications.csv`
    /// next to the report.
    #[arg(long)]
    replications: Option<PathBuf>,
    /// Leave wall-clock time out of the report so reruns are byte-identical.
    #[arg(long)]
    omit_runtime: bool,
}

#[derive(Debug, Args)]
struct IorArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Configuration holding a `design` block, or a bare design object.
    #[arg(long)]
    design: PathBuf,
    #[arg(long)]
    basis: Option<String>,
    /// Group sizes to check.
    #[arg(long, value_delimiter = ',', default_values_t = [10usize, 20, 50, 100, 200])]
    n: Vec<usize>,
    /// Neighbor complier shares to check.
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])]
    cbar: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_WEAK_THRESHOLD)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_target(s: &str) -> std::result::Result<Target, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_policy(s: &str) -> std::result::Result<PureControlPolicy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> std::result::Result<EffectKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Provenance attached to every output: the command line and the parsed
/// configuration it read.
#[derive(Debug, Serialize)]
struct Echo<'a> {
    argv: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<&'a AppConfig>,
}

fn write_out(path: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match path {
        Some(p) => fs::write(p, bytes)?,
        None => io::stdout().lock().write_all(bytes)?,
    }
    Ok(())
}

fn json_with_echo<T: Serialize>(value: &T, echo: &Echo) -> Result<Vec<u8>> {
    let mut v = serde_json::to_value(value)?;
    if let serde_json::Value::Object(map) = &mut v {
        map.insert("config".into(), serde_json::to_value(echo)?);
    }
    let mut bytes = serde_json::to_vec_pretty(&v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// `data.csv` -> `data.config.json`.
fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("config.json")
}

fn write_sidecar(path: Option<&Path>, echo: &Echo) -> Result<()> {
    if let Some(p) = path {
        let mut bytes = serde_json::to_vec_pretty(echo)?;
        bytes.push(b'\n');
        fs::write(sidecar(p), bytes)?;
    }
    Ok(())
}

fn basis_for(flag: Option<&str>, cfg: &AppConfig) -> Result<BasisSpec> {
    BasisSpec::from_name(flag.or(cfg.basis.as_deref()).unwrap_or("linear"))
}

fn options_for(flags: &EstimationFlags, cfg: &AppConfig) -> Result<EstimationOptions> {
    let est = cfg.estimation();
    Ok(EstimationOptions {
        basis: basis_for(flags.basis.as_deref(), cfg)?,
        pure_control: flags.pure_control.or(est.pure_control),
        small_sample: flags.small_sample || est.small_sample,
        ..EstimationOptions::default()
    })
}

fn simulate(args: &SimulateArgs, argv: &[String]) -> Result<()> {
    let cfg = AppConfig::load(&args.config)?;
    let mut sim = cfg.sim_config(&args.config)?;
    if let Some(seed) = args.seed {
        sim.seed = seed;
    }
    let data = simulate_experiment(&sim)?;
    let mut buf = Vec::new();
    write_data(&data, &mut buf)?;
    write_out(args.out.as_deref(), &buf)?;
    let echo = Echo { argv, config: Some(&cfg) };
    write_sidecar(args.out.as_deref(), &echo)?;
    if let Some(path) = &args.latent {
        let mut buf = Vec::new();
        write_latent(&data, &mut buf)?;
        fs::write(path, buf)?;
        write_sidecar(Some(path), &echo)?;
    }
    eprintln!("simulated {} groups, {} individuals", data.groups.len(), data.individuals());
    Ok(())
}

fn estimate_cmd(args: &EstimateArgs, argv: &[String]) -> Result<()> {
    let cfg = AppConfig::load_design_file(&args.common.design)?;
    let design = cfg.design(&args.common.design)?;
    let opts = options_for(&args.common, &cfg)?;
    let target = match args.target {
        Some(t) => t,
        None => match cfg.estimation().targets.as_deref() {
            Some([t]) => *t,
            Some(_) => {
                return Err(Error::InvalidArgument(
                    "configuration lists several targets; choose one with --target".into(),
                ))
            }
            None => Target::Joint,
        },
    };
    let data = ingest_csv(&args.common.data)?;
    let res = estimate(&data, &design, target, &opts)?;
    if res.diagnostics.pinv_count > 0 {
        eprintln!(
            "warning: {} individual moment matrices were pseudo-inverted",
            res.diagnostics.pinv_count
        );
    }
    let echo = Echo { argv, config: Some(&cfg) };
    write_out(args.out.as_deref(), &json_with_echo(&res, &echo)?)
}

fn effects_cmd(args: &EffectsArgs, argv: &[String]) -> Result<()> {
    let cfg = AppConfig::load_design_file(&args.common.design)?;
    let design = cfg.design(&args.common.design)?;
    let opts = options_for(&args.common, &cfg)?;
    let kinds = if args.kinds.is_empty() {
        EffectKind::IDENTIFIED.to_vec()
    } else {
        args.kinds.clone()
    };
    let mut targets: Vec<Target> = Vec::new();
    for k in &kinds {
        let t = k.source_target()?;
        if !targets.contains(&t) {
            targets.push(t);
        }
    }
    let data = ingest_csv(&args.common.data)?;
    let results = targets
        .iter()
        .map(|&t| estimate(&data, &design, t, &opts))
        .collect::<Result<Vec<_>>>()?;
    let inputs = EffectInputs::from_estimates(&results)?;
    let curves = kinds
        .iter()
        .map(|&k| effect_curve(&inputs, &opts.basis, k, &default_grid(k, args.delta), args.delta))
        .collect::<Result<Vec<_>>>()?;
    let mut buf = Vec::new();
    write_effects_csv(&curves, &mut buf)?;
    write_out(args.out.as_deref(), &buf)?;
    write_sidecar(args.out.as_deref(), &Echo { argv, config: Some(&cfg) })
}

fn montecarlo_cmd(args: &MontecarloArgs, argv: &[String]) -> Result<()> {
    let cfg = AppConfig::load(&args.config)?;
    let sim = cfg.sim_config(&args.config)?;
    let mc = cfg.mc();
    let est = cfg.estimation();
    let reps = args
        .reps
        .or(mc.reps)
        .ok_or_else(|| Error::InvalidArgument("number of replications not set (--reps or mc.reps)".into()))?;
    let mut opts = McOptions::new(reps, args.jobs.or(mc.jobs).unwrap_or(1));
    opts.estimators = est.targets.clone().unwrap_or_else(|| DEFAULT_ESTIMATORS.to_vec());
    opts.estimation = EstimationOptions {
        basis: basis_for(None, &cfg)?,
        pure_control: est.pure_control,
        small_sample: est.small_sample,
        ..EstimationOptions::default()
    };
    if let Some(d) = mc.oracle_draws {
        opts.oracle_draws = d;
    }
    opts.record_runtime = !args.omit_runtime;
    let report = run_mc(&sim, &opts)?;
    if let Some(t) = report.runtime_secs {
        eprintln!("{} replications in {t:.1} s", report.config.reps);
    }
    for row in report.rows.iter().filter(|r| r.excluded > 0) {
        eprintln!("warning: {} {}: {} singular replications excluded", row.target, row.name, row.excluded);
    }
    let echo = Echo { argv, config: Some(&cfg) };
    write_out(args.out.as_deref(), &json_with_echo(&report, &echo)?)?;
    let csv_path = args.replications.clone().or_else(|| {
        args.out
            .as_ref()
            .map(|p| p.with_extension("replications.csv"))
    });
    if let Some(path) = csv_path {
        let mut buf = Vec::new();
        write_replications_csv(&report, &mut buf)?;
        fs::write(&path, buf)?;
        write_sidecar(Some(&path), &echo)?;
    }
    Ok(())
}

fn ior_cmd(args: &IorArgs, argv: &[String]) -> Result<()> {
    let data = ingest_csv(&args.data)?;
    let res = ior_test(&data)?;
    if res.p_value < 0.05 {
        eprintln!("warning: take-up varies with saturation (p = {:.4})", res.p_value);
    }
    let echo = Echo { argv, config: None };
    write_out(args.out.as_deref(), &json_with_echo(&res, &echo)?)
}

fn validate_cmd(args: &ValidateArgs, argv: &[String]) -> Result<()> {
    let cfg = AppConfig::load_design_file(&args.design)?;
    let design = cfg.design(&args.design)?;
    let basis = basis_for(args.basis.as_deref(), &cfg)?;
    let diag = validate_design(&design, &basis, &args.n, &args.cbar, args.threshold)?;
    if diag.singular {
        eprintln!("warning: the design does not identify the {} basis", basis.name());
    } else if diag.weak {
        eprintln!("warning: the design identifies the {} basis only weakly", basis.name());
    }
    let echo = Echo { argv, config: Some(&cfg) };
    write_out(args.out.as_deref(), &json_with_echo(&diag, &echo)?)
}

fn run(cli: &Cli, argv: &[String]) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(a, argv),
        Command::Estimate(a) => estimate_cmd(a, argv),
        Command::Effects(a) => effects_cmd(a, argv),
        Command::Montecarlo(a) => montecarlo_cmd(a, argv),
        Command::IorTest(a) => ior_cmd(a, argv),
        Command::ValidateDesign(a) => validate_cmd(a, argv),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

//! Randomized saturation experiments with one-sided non-compliance.
//!
//! The crate covers the whole pipeline: sampling saturation designs and
//! Bernoulli offers ([`design`]), the random coefficients outcome model
//! ([`model`]), a simulation data-generating process ([`dgp`]), exact
//! design-implied moment matrices ([`moments`]), the transformed-instrument
//! IV estimator with cluster-robust inference ([`estimator`]), effect curves
//! ([`effects`]) and a Monte Carlo harness ([`montecarlo`]).

pub mod design;
pub mod dgp;
pub mod effects;
pub mod error;
pub mod estimator;
pub mod io;
pub mod model;
pub mod moments;
pub mod montecarlo;
pub mod rng;
pub mod stats;

pub use design::{DesignDiagnostics, SaturationDesign};
pub use dgp::{ExperimentData, Group, SimConfig};
pub use error::{Error, Result};
pub use estimator::{EstimateResult, EstimationOptions, PureControlPolicy, Target};
pub use model::{BasisSpec, Coefficients, MeanCoefficients, Subpopulation};
pub use moments::MomentMatrices;
pub use rng::SeedStream;

//! JSON configuration file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use sativ_core::design::DesignSpec;
use sativ_core::{Error, PureControlPolicy, Result, SaturationDesign, SimConfig, Target};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlock {
    #[serde(alias = "G")]
    pub groups: usize,
    #[serde(alias = "n")]
    pub group_size: usize,
    pub complier_shares: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complier_share_probs: Option<Vec<f64>>,
    pub means: [f64; 4],
    pub kappa: [f64; 4],
    pub sigma: [f64; 4],
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<Target>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pure_control: Option<PureControlPolicy>,
    #[serde(default)]
    pub small_sample: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_draws: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimation: Option<EstimationBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McBlock>,
}

fn missing(block: &str, path: &Path) -> Error {
    Error::InvalidArgument(format!("{} has no `{block}` block", path.display()))
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    /// Reads either a full configuration or a bare design object
    /// (`{"saturations": [...], "counts": [...]}`).
    pub fn load_design_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
        let bare = value.get("saturations").is_some();
        let parsed = if bare {
            serde_json::from_value::<DesignSpec>(value).map(|d| AppConfig {
                design: Some(d),
                ..AppConfig::default()
            })
        } else {
            serde_json::from_value::<AppConfig>(value)
        };
        parsed.map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    pub fn design(&self, path: &Path) -> Result<SaturationDesign> {
        let spec = self.design.clone().ok_or_else(|| missing("design", path))?;
        SaturationDesign::try_from(spec)
    }

    pub fn sim_config(&self, path: &Path) -> Result<SimConfig> {
        let sim = self.sim.clone().ok_or_else(|| missing("sim", path))?;
        let cfg = SimConfig {
            groups: sim.groups,
            group_size: sim.group_size,
            design: self.design(path)?,
            complier_shares: sim.complier_shares,
            complier_share_probs: sim.complier_share_probs,
            means: sim.means,
            kappa: sim.kappa,
            sigma: sim.sigma,
            seed: sim.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn estimation(&self) -> EstimationBlock {
        self.estimation.clone().unwrap_or_default()
    }

    pub fn mc(&self) -> McBlock {
        self.mc.clone().unwrap_or_default()
    }
}

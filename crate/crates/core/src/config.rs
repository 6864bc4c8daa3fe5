//! Run configuration: every module's settings in one versioned JSON document.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::axis::{Aggregator, DEFAULT_LAMBDA3_GRID};
use crate::decomposition::{FilterOptions, IcaOptions, PreprocessConfig};
use crate::error::{Error, Result};
use crate::rootmap::{Residualization, ZetaOptions, DEFAULT_LAMBDA_GRID};
use crate::simulator::{SubjectParams, TruthParams};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub simulation: SimulationConfig,
    pub preprocess: PreprocessConfig,
    pub ica: IcaConfig,
    pub filter: FilterOptions,
    pub rootmap: RootmapConfig,
    pub axis: AxisConfig,
    pub bootstrap: BootstrapConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            simulation: SimulationConfig::default(),
            preprocess: PreprocessConfig::default(),
            ica: IcaConfig::default(),
            filter: FilterOptions::default(),
            rootmap: RootmapConfig::default(),
            axis: AxisConfig::default(),
            bootstrap: BootstrapConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses a config document; errors carry the line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.ica.n_components == 0 {
            return Err(Error::InvalidArgument("ica.n_components must be at least 1".into()));
        }
        if self.rootmap.lambda1_grid.is_empty() || self.rootmap.lambda2_grid.is_empty() {
            return Err(Error::InvalidArgument("rootmap penalty grids must be nonempty".into()));
        }
        if self.axis.lambda3_grid.is_empty() {
            return Err(Error::InvalidArgument("axis.lambda3_grid must be nonempty".into()));
        }
        if self.preprocess.smoothing_fwhm_mm < 0.0 {
            return Err(Error::InvalidArgument("smoothing_fwhm_mm must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub dims: [usize; 3],
    pub voxel_size_mm: f64,
    pub n_subjects: usize,
    pub n_timepoints: usize,
    pub truth: TruthParams,
    pub subject: SubjectParams,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            dims: [8, 8, 8],
            voxel_size_mm: 3.0,
            n_subjects: 20,
            n_timepoints: 200,
            truth: TruthParams::default(),
            subject: SubjectParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcaConfig {
    pub n_components: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for IcaConfig {
    fn default() -> Self {
        let o = IcaOptions::default();
        IcaConfig {
            n_components: 3,
            tol: o.tol,
            max_iter: o.max_iter,
        }
    }
}

impl IcaConfig {
    pub fn options(&self) -> IcaOptions {
        IcaOptions {
            tol: self.tol,
            max_iter: self.max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RootmapConfig {
    pub lambda1_grid: Vec<f64>,
    pub lambda2_grid: Vec<f64>,
    pub residualization: Residualization,
    pub solver: ZetaOptions,
}

impl Default for RootmapConfig {
    fn default() -> Self {
        RootmapConfig {
            lambda1_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            lambda2_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            residualization: Residualization::Pooled,
            solver: ZetaOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AxisConfig {
    pub aggregator: Aggregator,
    pub band_hz: Option<(f64, f64)>,
    pub tr_seconds: Option<f64>,
    pub lambda3_grid: Vec<f64>,
    pub cv_folds: usize,
    pub n_axes: usize,
    pub max_support: Option<usize>,
    pub exhaustive_limit: usize,
    /// Optional names for the symptom items, used in axes.json.
    pub symptom_names: Option<Vec<String>>,
}

impl Default for AxisConfig {
    fn default() -> Self {
        AxisConfig {
            aggregator: Aggregator::LogVar,
            band_hz: None,
            tr_seconds: None,
            lambda3_grid: DEFAULT_LAMBDA3_GRID.to_vec(),
            cv_folds: 5,
            n_axes: 1,
            max_support: None,
            exhaustive_limit: 12,
            symptom_names: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    /// Refit stages 1–3 per resample instead of stage 3 only.
    pub refit_all: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_resamples: 100,
            refit_all: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    NoRootmap,
    NoAxis,
    Both,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::None, Ablation::NoRootmap, Ablation::NoAxis, Ablation::Both];

    pub fn uses_rootmap(self) -> bool {
        matches!(self, Ablation::None | Ablation::NoAxis)
    }

    pub fn uses_axis(self) -> bool {
        matches!(self, Ablation::None | Ablation::NoRootmap)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoRootmap => "no_rootmap",
            Ablation::NoAxis => "no_axis",
            Ablation::Both => "both",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation '{s}'")))
    }
}

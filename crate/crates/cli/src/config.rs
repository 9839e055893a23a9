//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use sha2::{Digest, Sha256};

use dlnm_lps::likelihood::Family;
use dlnm_lps::model::{MainEffect, ModelSpec, Modifier, SplineKind};
use dlnm_lps::simgen::{AreaRegime, Modification};
use dlnm_lps::spatial::{AdjacencyGraph, SpatialSpec};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub inference: InferenceConfig,
    pub compare: Option<CompareConfig>,
    pub simulation: Option<SimulationConfig>,
    pub score: Option<ScoreConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub panel: PathBuf,
    pub adjacency: Option<PathBuf>,
    /// Replace exposures by per-area empirical percentiles.
    #[serde(default)]
    pub percentiles: bool,
    /// Day-of-week dummies from ISO dates.
    #[serde(default)]
    pub day_of_week: bool,
    /// Natural-spline time trend with this many degrees of freedom per year.
    pub trend_df_per_year: Option<f64>,
    /// Categorical columns, dummy-coded against their first level.
    #[serde(default)]
    pub factors: Vec<String>,
    /// Numeric columns entered linearly.
    #[serde(default)]
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Option<String>,
    pub modifier: Option<String>,
    pub modifier_df: Option<usize>,
    pub categories: Option<usize>,
    pub main_effect: Option<String>,
    pub main_effect_df: Option<usize>,
    pub spatial: Option<String>,
    pub v_x: Option<usize>,
    pub v_l: Option<usize>,
    pub max_lag: Option<usize>,
    pub lag_shrink: Option<bool>,
    pub spline: Option<String>,
    pub penalized: Option<bool>,
    pub exposure_range: Option<[f64; 2]>,
    pub modifier_range: Option<[f64; 2]>,
}

impl ModelConfig {
    /// `self` with every key set in `other` replaced.
    pub fn overlay(&self, other: &ModelConfig) -> ModelConfig {
        macro_rules! pick {
            ($($f:ident),*) => { ModelConfig { $($f: other.$f.clone().or_else(|| self.$f.clone())),* } };
        }
        pick!(
            family,
            modifier,
            modifier_df,
            categories,
            main_effect,
            main_effect_df,
            spatial,
            v_x,
            v_l,
            max_lag,
            lag_shrink,
            spline,
            penalized,
            exposure_range,
            modifier_range
        )
    }

    pub fn family(&self) -> CliResult<Family> {
        parse_family(self.family.as_deref().unwrap_or("poisson"))
    }

    /// Builds the model spec; `graph` is required for ICAR and Leroux priors.
    pub fn to_spec(&self, graph: Option<&AdjacencyGraph>) -> CliResult<ModelSpec> {
        let categories = self.categories.unwrap_or(2);
        let modifier = match self.modifier.as_deref().unwrap_or("none") {
            "none" | "common" => Modifier::None,
            "linear" => Modifier::Linear,
            "smooth" => Modifier::Smooth { v_z: self.modifier_df.unwrap_or(5) },
            "categorical" | "binary" => Modifier::Categorical { categories },
            other => return Err(CliError::Config(format!("unknown modifier '{other}'"))),
        };
        let default_main = match modifier {
            Modifier::None => "absent",
            Modifier::Categorical { .. } => "dummy",
            _ => "linear",
        };
        let main_effect = match self.main_effect.as_deref().unwrap_or(default_main) {
            "absent" | "none" => MainEffect::Absent,
            "linear" => MainEffect::Linear,
            "smooth" => MainEffect::Smooth { v_z2: self.main_effect_df.unwrap_or(5) },
            "dummy" | "categorical" => MainEffect::Dummy { categories },
            other => return Err(CliError::Config(format!("unknown main effect '{other}'"))),
        };
        let need_graph =
            |kind: &str| graph.cloned().ok_or_else(|| CliError::Config(format!("the {kind} prior needs an adjacency file")));
        let spatial = match self.spatial.as_deref().unwrap_or("leroux") {
            "leroux" => SpatialSpec::leroux(need_graph("Leroux")?),
            "icar" => SpatialSpec::icar(need_graph("ICAR")?),
            "iid" => SpatialSpec::iid(),
            other => return Err(CliError::Config(format!("unknown spatial prior '{other}'"))),
        };
        let mut spec = ModelSpec::new(modifier, main_effect, spatial);
        spec.family = self.family()?;
        if let Some(v) = self.v_x {
            spec.v_x = v;
        }
        if let Some(v) = self.v_l {
            spec.v_l = v;
        }
        if let Some(l) = self.max_lag {
            spec.max_lag = l;
        }
        spec.lag_shrink = self.lag_shrink.unwrap_or(true);
        spec.spline = match self.spline.as_deref().unwrap_or("pspline") {
            "pspline" => SplineKind::PSpline,
            "natural" => SplineKind::Natural,
            other => return Err(CliError::Config(format!("unknown spline kind '{other}'"))),
        };
        spec.penalized = self.penalized.unwrap_or(true);
        spec.exposure_range = self.exposure_range.map(|[a, b]| (a, b));
        spec.modifier_range = self.modifier_range.map(|[a, b]| (a, b));
        spec.validate()?;
        Ok(spec)
    }
}

pub fn parse_family(name: &str) -> CliResult<Family> {
    match name {
        "poisson" => Ok(Family::Poisson),
        "negative_binomial" | "nb" => Ok(Family::NegativeBinomial),
        other => Err(CliError::Config(format!("unknown family '{other}'"))),
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    /// Reference exposure `x0`; the median exposure when absent.
    pub reference: Option<f64>,
    /// `[from, to, step]`; 41 points across the exposure basis when absent.
    pub exposure_grid: Option<[f64; 3]>,
    /// Modifier values for RR grids; the 10/50/90% quantiles of `z` when absent.
    pub modifier_values: Option<Vec<f64>>,
    pub draws: Option<usize>,
    pub exceedance_threshold: Option<f64>,
    /// Time-index window `[start, end)` for attributable fractions.
    pub af_period: Option<[usize; 2]>,
    /// `"median"` sets every area's modifier to the median for the counterfactual.
    pub counterfactual: Option<String>,
    /// Quantiles of `z` compared by the RRR curve.
    pub rrr_quantiles: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub models: Vec<CompareModel>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CompareModel {
    pub name: String,
    /// Row label; defaults to family and exposure scale.
    pub row: Option<String>,
    pub percentiles: Option<bool>,
    #[serde(flatten)]
    pub model: ModelConfig,
    /// Keys not claimed above; serde cannot reject them through a flatten.
    #[serde(flatten)]
    pub unknown: std::collections::BTreeMap<String, toml::Value>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub modification: Option<String>,
    pub regime: Option<String>,
    pub areas: usize,
    pub times: usize,
    pub replicates: usize,
    pub family: Option<String>,
    pub variants: Vec<String>,
    pub draws: Option<usize>,
    /// Wide CSV with one exposure column per area; synthetic when absent.
    pub exposure: Option<PathBuf>,
    pub adjacency: Option<PathBuf>,
    #[serde(default)]
    pub write_panels: bool,
    #[serde(default = "default_true")]
    pub write_grids: bool,
}

fn default_true() -> bool {
    true
}

impl SimulationConfig {
    pub fn modification(&self) -> CliResult<Modification> {
        match self.modification.as_deref().unwrap_or("linear") {
            "linear" => Ok(Modification::Linear),
            "complex" => Ok(Modification::Complex),
            other => Err(CliError::Config(format!("unknown modification '{other}'"))),
        }
    }

    pub fn regime(&self) -> CliResult<AreaRegime> {
        match self.regime.as_deref().unwrap_or("large") {
            "small" => Ok(AreaRegime::Small),
            "large" => Ok(AreaRegime::Large),
            other => Err(CliError::Config(format!("unknown area regime '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    /// Directory written by `simulate`; replicate grids are discovered there.
    pub directory: Option<PathBuf>,
    /// Estimator names whose grids are scored (directory mode).
    #[serde(default)]
    pub estimators: Vec<String>,
    /// Explicit truth grids, one per replicate.
    #[serde(default)]
    pub truth: Vec<PathBuf>,
    /// Explicit estimate grids per estimator name, aligned with `truth`.
    #[serde(default)]
    pub estimates: std::collections::BTreeMap<String, Vec<PathBuf>>,
}

/// A parsed configuration with its provenance.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    /// SHA-256 of the configuration file bytes, hex encoded.
    pub hash: String,
    pub base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| CliError::Config(format!("{} is not UTF-8", path.display())))?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let hash = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, hash, base_dir })
    }

    /// Resolves a path relative to the configuration file.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

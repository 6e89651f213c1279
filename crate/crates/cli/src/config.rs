use std::path::{Path, PathBuf};

use caplab::discrete::{PlateRule, StepRule};
use caplab::radial::Method;
use caplab::WeightSpec;
use clap::ValueEnum;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] caplab::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Engine(caplab::Error::Validation(_) | caplab::Error::Calibration { .. }) => 3,
            _ => 2,
        }
    }
}

pub fn missing(key: &str) -> CliError {
    CliError::Config(format!(
        "missing required parameter `{key}` (flag or config key)"
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
    Svg,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub format: Option<Format>,
    pub path: Option<PathBuf>,
}

/// Reads a TOML config, falling back to JSON for `.json` files or when the
/// text does not parse as TOML but does as JSON.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let is_json = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        return serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())));
    }
    match toml::from_str(&text) {
        Ok(v) => Ok(v),
        Err(toml_err) => {
            if text.trim_start().starts_with('{') {
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
            } else {
                Err(CliError::Config(format!("{}: {toml_err}", path.display())))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightFlag {
    RadialPower,
    Identity,
    Zero,
    Constant,
}

/// Weight from flags, else from the config table, else the model weight.
pub fn weight_spec(
    flag: Option<WeightFlag>,
    configured: Option<WeightSpec>,
    n: Option<usize>,
    sigma: Option<f64>,
    scale: Option<f64>,
) -> Result<WeightSpec, CliError> {
    if flag.is_none() {
        if let Some(spec) = configured {
            return Ok(spec);
        }
    }
    let n = n.ok_or_else(|| missing("n"))?;
    Ok(match flag.unwrap_or(WeightFlag::RadialPower) {
        WeightFlag::RadialPower => WeightSpec::RadialPower {
            n,
            sigma: sigma.ok_or_else(|| missing("sigma"))?,
            scale,
        },
        WeightFlag::Identity => WeightSpec::Identity { n },
        WeightFlag::Zero => WeightSpec::Zero { n },
        WeightFlag::Constant => WeightSpec::Constant {
            n,
            value: scale.ok_or_else(|| missing("scale"))?,
        },
    })
}

/// Explicit plate masks: a CSV of `inner|outer,i,j[,k]` rows on the given grid.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    pub file: PathBuf,
    pub origin: Vec<f64>,
    pub spacing: f64,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapConfig {
    pub n: Option<usize>,
    pub p: Option<f64>,
    pub sigma: Option<f64>,
    pub r_in: Option<f64>,
    pub r_out: Option<f64>,
    pub weight: Option<WeightSpec>,
    pub method: Option<Method>,
    pub spacing: Option<f64>,
    pub reflect: Option<bool>,
    pub plate_rule: Option<PlateRule>,
    pub max_iters: Option<usize>,
    pub tolerance: Option<f64>,
    pub step_rule: Option<StepRule>,
    pub mask: Option<MaskConfig>,
    pub dump: Option<PathBuf>,
    pub output: Option<OutputConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    #[default]
    Capacity,
    Frakc,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub n: Option<usize>,
    pub p: Option<f64>,
    pub sigma: Option<f64>,
    pub weight: Option<WeightSpec>,
    pub quantity: Option<Quantity>,
    pub q: Option<f64>,
    pub nu: Option<f64>,
    /// `r_in / r_out` of each condenser in a capacity sweep.
    pub ratio: Option<f64>,
    pub r_min: Option<f64>,
    pub r_max: Option<f64>,
    pub count: Option<usize>,
    pub radii: Option<Vec<f64>>,
    pub window: Option<(f64, f64)>,
    pub output: Option<OutputConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub example: Option<String>,
    pub n: Option<usize>,
    pub q: Option<f64>,
    pub sigma: Option<f64>,
    pub mu: Option<f64>,
    pub alpha: Option<f64>,
    pub u: Option<caplab::verifier::RadialExpr>,
    pub v: Option<caplab::verifier::RadialExpr>,
    pub r_max: Option<f64>,
    pub grid_points: Option<usize>,
    pub output: Option<OutputConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    pub n: Option<usize>,
    pub q: Option<f64>,
    pub sigma: Option<f64>,
    pub nu: Option<f64>,
    pub from_capacity: Option<bool>,
    pub output: Option<OutputConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthTableConfig {
    /// `(n, q, σ)` triples.
    pub points: Option<Vec<(usize, f64, f64)>>,
    pub output: Option<OutputConfig>,
}

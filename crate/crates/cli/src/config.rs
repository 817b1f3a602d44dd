//! The run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use spin_impute::data::BlockPolicy;
use spin_impute::model::ModelConfig;
use spin_impute::train::TrainConfig;
use spin_impute::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub inject: InjectConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub values_csv: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_mask_csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distances_csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges_csv: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Window length.
    #[serde(rename = "W", alias = "window", default = "default_window")]
    pub window: usize,
    /// Stride between evaluation windows.
    #[serde(default = "default_window")]
    pub stride: usize,
    #[serde(default)]
    pub split: SplitConfig,
}

fn default_window() -> usize {
    24
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { train: 0.7, val: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Point,
    Block,
    Sweep,
    #[default]
    None,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectConfig {
    #[serde(default)]
    pub policy: Policy,
    #[serde(default)]
    pub params: Map<String, Value>,
    #[serde(default)]
    pub seed: u64,
}

/// A validated injection request.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Injector {
    Point { rate: f64 },
    Block(BlockPolicy),
    Sweep { p: f64 },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PointParams {
    rate: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SweepParams {
    p: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockParams {
    point_rate: Option<f64>,
    failure_prob: Option<f64>,
    len_min: Option<usize>,
    len_max: Option<usize>,
}

fn params<T: for<'de> Deserialize<'de>>(policy: &str, map: &Map<String, Value>) -> Result<T> {
    serde_json::from_value(Value::Object(map.clone()))
        .map_err(|e| Error::Invalid(format!("inject.params for policy {policy}: {e}")))
}

impl InjectConfig {
    pub fn injector(&self) -> Result<Option<Injector>> {
        let probability = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(v)
            } else {
                Err(Error::Invalid(format!("inject.params.{name} must lie in [0, 1), got {v}")))
            }
        };
        Ok(match self.policy {
            Policy::None => {
                if !self.params.is_empty() {
                    return Err(Error::Invalid("policy none takes no params".into()));
                }
                None
            }
            Policy::Point => {
                let p: PointParams = params("point", &self.params)?;
                Some(Injector::Point {
                    rate: probability("rate", p.rate)?,
                })
            }
            Policy::Sweep => {
                let p: SweepParams = params("sweep", &self.params)?;
                Some(Injector::Sweep { p: probability("p", p.p)? })
            }
            Policy::Block => {
                let p: BlockParams = params("block", &self.params)?;
                let d = BlockPolicy::default();
                let policy = BlockPolicy {
                    point_rate: probability("point_rate", p.point_rate.unwrap_or(d.point_rate))?,
                    failure_prob: probability("failure_prob", p.failure_prob.unwrap_or(d.failure_prob))?,
                    len_min: p.len_min.unwrap_or(d.len_min),
                    len_max: p.len_max.unwrap_or(d.len_max),
                };
                if policy.len_min == 0 || policy.len_min > policy.len_max {
                    return Err(Error::Invalid(format!(
                        "block lengths need 1 <= len_min <= len_max, got {}..{}",
                        policy.len_min, policy.len_max
                    )));
                }
                Some(Injector::Block(policy))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("run") }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_json(text: &str, source: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Data {
            source_name: source.display().to_string(),
            detail: e.to_string(),
        })
    }

    /// Reads, resolves (paths relative to the file's directory) and
    /// validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_json(&text, path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let base = std::path::absolute(&base).unwrap_or(base);
        cfg.resolve_paths(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let d = &mut self.data;
        resolve(base, &mut d.values_csv);
        for p in [&mut d.mask_csv, &mut d.eval_mask_csv, &mut d.distances_csv, &mut d.edges_csv]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
        resolve(base, &mut self.output.dir);
    }

    /// Checks cross-field rules and aligns the training window with
    /// `data.W`.
    pub fn validate(&mut self) -> Result<()> {
        let d = &self.data;
        match (&d.distances_csv, &d.edges_csv) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::Invalid(
                    "data needs exactly one of distances_csv and edges_csv".into(),
                ))
            }
            (Some(_), None) => {
                if d.gamma.is_none() || d.delta.is_none() {
                    return Err(Error::Invalid(
                        "data.gamma and data.delta are required with distances_csv".into(),
                    ));
                }
            }
            (None, Some(_)) => {
                if d.gamma.is_some() || d.delta.is_some() {
                    return Err(Error::Invalid("data.gamma and data.delta only apply to distances_csv".into()));
                }
            }
        }
        if d.window == 0 || d.stride == 0 {
            return Err(Error::Invalid("data.W and data.stride must be positive".into()));
        }
        let s = d.split;
        if !(s.train > 0.0 && s.val > 0.0 && s.train + s.val < 1.0) {
            return Err(Error::Invalid(format!(
                "split fractions must be positive and leave room for a test set, got train {} val {}",
                s.train, s.val
            )));
        }
        if self.train.window != d.window {
            if self.train.window != TrainConfig::default().window {
                log::warn!("train.window {} replaced by data.W {}", self.train.window, d.window);
            }
            self.train.window = d.window;
        }
        self.model.validate()?;
        self.train.validate()?;
        self.inject.injector()?;
        Ok(())
    }
}

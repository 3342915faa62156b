//! Run configuration: a JSON file plus `--set key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use treeflow::gbdt::GbmParams;
use treeflow::model::TrainConfig;

use crate::error::{config_err, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: Option<DataSource>,
    #[serde(default)]
    pub target_columns: Vec<String>,
    #[serde(default)]
    pub target_transform: TargetTransformKind,
    #[serde(default)]
    pub split: SplitSpec,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: TrainConfig,
    #[serde(default)]
    pub benchmark: BenchmarkSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// A CSV file with a header row.
    Path(PathBuf),
    /// Draws from the four-cell synthetic benchmark, already split.
    Synthetic(SyntheticData),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticData {
    pub n_train_per_cell: usize,
    pub n_val_per_cell: usize,
    pub n_test_per_cell: usize,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self {
            n_train_per_cell: 5000,
            n_val_per_cell: 1000,
            n_test_per_cell: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetTransformKind {
    #[default]
    Standardize,
    /// `log10` followed by standardization.
    Log10Standardize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitSpec {
    Holdout {
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
    Kfold {
        folds: usize,
        #[serde(default = "default_fold_test_fraction")]
        test_fraction: f64,
        #[serde(default = "default_val_fraction")]
        val_fraction: f64,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_fold_test_fraction() -> f64 {
    0.1
}

fn default_val_fraction() -> f64 {
    0.2
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Holdout {
            test_fraction: default_test_fraction(),
            val_fraction: default_val_fraction(),
        }
    }
}

/// Settings of the synthetic benchmark command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSection {
    /// Repetitions; their seeds are derived from the run seed.
    pub n_seeds: usize,
    pub n_train_per_cell: usize,
    pub n_val_per_cell: usize,
    pub n_test_per_cell: usize,
    pub gbm: GbmParams,
    pub pdf_lo: f64,
    pub pdf_hi: f64,
    pub pdf_points: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        let data = SyntheticData::default();
        Self {
            n_seeds: 5,
            n_train_per_cell: data.n_train_per_cell,
            n_val_per_cell: data.n_val_per_cell,
            n_test_per_cell: data.n_test_per_cell,
            gbm: GbmParams::default(),
            pdf_lo: -15.0,
            pdf_hi: 15.0,
            pdf_points: 301,
        }
    }
}

/// Split `key=value` and set the dotted key in `root`. The value is parsed as
/// JSON and falls back to a plain string.
pub fn apply_override(root: &mut Value, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err!("override '{spec}' is not of the form key=value"))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(config_err!("override '{spec}' has an empty key segment"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = root;
    let segments: Vec<&str> = key.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            config_err!(
                "override '{key}': '{}' is not an object",
                segments[..i].join(".")
            )
        })?;
        if i + 1 == segments.len() {
            obj.insert((*seg).to_owned(), value);
            return Ok(());
        }
        node = obj
            .entry(*seg)
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("the loop returns on the last segment")
}

impl RunConfig {
    /// Read, override and parse a configuration file.
    pub fn load(path: &Path, overrides: &[String]) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err!("cannot read config {}: {e}", path.display()))?;
        let mut root: Value = serde_json::from_str(&text)
            .map_err(|e| config_err!("config {} is not valid JSON: {e}", path.display()))?;
        if !root.is_object() {
            return Err(config_err!(
                "config {} must be a JSON object",
                path.display()
            ));
        }
        for spec in overrides {
            apply_override(&mut root, spec)?;
        }
        serde_json::from_value(root).map_err(|e| config_err!("invalid config: {e}"))
    }

    /// The source of training data; its presence is checked by [`validate_train`](Self::validate_train).
    pub fn data(&self) -> CliResult<&DataSource> {
        self.data
            .as_ref()
            .ok_or_else(|| config_err!("missing data section: set data.path or data.synthetic"))
    }

    pub fn validate_train(&self) -> CliResult<()> {
        match self.data()? {
            DataSource::Path(p) => {
                if !p.is_file() {
                    return Err(config_err!("data path {} does not exist", p.display()));
                }
                if self.target_columns.is_empty() {
                    return Err(config_err!("target_columns must name at least one column"));
                }
            }
            DataSource::Synthetic(s) => {
                if !(self.target_columns.is_empty() || self.target_columns == ["y"]) {
                    return Err(config_err!(
                        "synthetic data has the single target column 'y'"
                    ));
                }
                if matches!(self.split, SplitSpec::Kfold { .. }) {
                    return Err(config_err!(
                        "synthetic data comes pre-split; a kfold split does not apply"
                    ));
                }
                if self.target_transform != TargetTransformKind::Standardize {
                    return Err(config_err!(
                        "synthetic targets can be negative; use the standardize transform"
                    ));
                }
                if s.n_train_per_cell == 0 || s.n_val_per_cell == 0 || s.n_test_per_cell == 0 {
                    return Err(config_err!("synthetic row counts must be positive"));
                }
            }
        }
        let fractions = match self.split {
            SplitSpec::Holdout {
                test_fraction,
                val_fraction,
            } => [test_fraction, val_fraction],
            SplitSpec::Kfold {
                folds,
                test_fraction,
                val_fraction,
            } => {
                if folds == 0 {
                    return Err(config_err!("split.kfold.folds must be at least 1"));
                }
                [test_fraction, val_fraction]
            }
        };
        if fractions.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(config_err!("split fractions must lie in (0, 1)"));
        }
        self.model.validate().map_err(|e| config_err!("model: {e}"))
    }

    pub fn validate_synth(&self) -> CliResult<()> {
        let b = &self.benchmark;
        if b.n_seeds == 0 {
            return Err(config_err!("benchmark.n_seeds must be at least 1"));
        }
        if b.n_train_per_cell == 0 || b.n_val_per_cell == 0 || b.n_test_per_cell == 0 {
            return Err(config_err!("benchmark row counts must be positive"));
        }
        if b.pdf_points < 2 || !(b.pdf_lo < b.pdf_hi) {
            return Err(config_err!(
                "benchmark pdf grid needs at least two points over a non-empty range"
            ));
        }
        self.model.validate().map_err(|e| config_err!("model: {e}"))
    }

    /// Model hyperparameters with the run-level transform applied.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            log10_targets: self.target_transform == TargetTransformKind::Log10Standardize,
            ..self.model.clone()
        }
    }
}

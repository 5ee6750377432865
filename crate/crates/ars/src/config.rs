//! Run configuration files: a data source plus a scenario.

use std::path::{Path, PathBuf};

use ars_core::data::{synth_gaussian_clusters, Dataset, SynthSpec};
use ars_core::metrics::{ColumnGroup, ImageDims};
use ars_core::protocol::ScenarioConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::idx::load_idx;
use crate::tabular::{load_csv, Schema};

pub const DATA_DIR_ENV: &str = "ARS_DATA_DIR";

fn mnist_images() -> String {
    "mnist/digits-images-idx3-ubyte.gz".into()
}

fn mnist_labels() -> String {
    "mnist/digits-labels-idx1-ubyte.gz".into()
}

fn mnist_test() -> usize {
    1000
}

/// Where samples come from. Relative paths resolve against the data directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// IDX files. Without explicit test files, `test` samples are held out
    /// after a shuffle seeded by `holdout_seed`.
    Mnist {
        #[serde(default = "mnist_images")]
        images: String,
        #[serde(default = "mnist_labels")]
        labels: String,
        #[serde(default)]
        test_images: Option<String>,
        #[serde(default)]
        test_labels: Option<String>,
        #[serde(default = "mnist_test")]
        test: usize,
        #[serde(default)]
        holdout_seed: u64,
    },
    Adult {
        train: String,
        test: String,
        schema: String,
    },
    Synthetic {
        #[serde(flatten)]
        spec: SynthSpec,
        test: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    #[serde(flatten)]
    pub scenario: ScenarioConfig,
}

/// Loaded train/held-out split with the column layout (tabular sources only).
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    pub groups: Vec<ColumnGroup>,
    pub image: Option<ImageDims>,
}

impl RunConfig {
    pub fn parse(text: &str, json: bool) -> Result<Self, CliError> {
        let cfg: RunConfig = if json {
            serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON config: {e}")))?
        } else {
            toml::from_str(text).map_err(|e| CliError::Config(format!("invalid TOML config: {e}")))?
        };
        cfg.scenario.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a `.toml` or `.json` file (anything else is tried as TOML).
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::missing(path, e))?;
        Self::parse(&text, path.extension().is_some_and(|e| e == "json"))
    }
}

/// `--data-dir`, then `$ARS_DATA_DIR`, then `./data`.
pub fn data_dir(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn existing(root: &Path, rel: &str) -> Result<PathBuf, CliError> {
    let p = root.join(rel);
    if p.exists() {
        Ok(p)
    } else {
        Err(CliError::MissingFile(p))
    }
}

pub fn load_data(source: &DataSource, root: &Path) -> Result<LoadedData, CliError> {
    match source {
        DataSource::Mnist {
            images,
            labels,
            test_images,
            test_labels,
            test,
            holdout_seed,
        } => {
            let all = load_idx(&existing(root, images)?, &existing(root, labels)?)?;
            let (train, test) = match (test_images, test_labels) {
                (Some(ti), Some(tl)) => (all, load_idx(&existing(root, ti)?, &existing(root, tl)?)?),
                (None, None) => {
                    if *test >= all.len() {
                        return Err(CliError::Config(format!(
                            "cannot hold out {test} of {} samples",
                            all.len()
                        )));
                    }
                    let all = all.shuffled(*holdout_seed);
                    let cut = all.len() - test;
                    (all.slice(0..cut), all.slice(cut..all.len()))
                }
                _ => return Err(CliError::Config("test_images and test_labels go together".into())),
            };
            Ok(LoadedData {
                train,
                test,
                groups: Vec::new(),
                image: Some(ImageDims::MNIST),
            })
        }
        DataSource::Adult { train, test, schema } => {
            let schema = Schema::load(&existing(root, schema)?)?;
            let tr = load_csv(&existing(root, train)?, &schema)?;
            let te = load_csv(&existing(root, test)?, &schema)?;
            Ok(LoadedData {
                train: tr.dataset,
                test: te.dataset,
                groups: tr.groups,
                image: None,
            })
        }
        DataSource::Synthetic { spec, test } => {
            let ds = synth_gaussian_clusters(spec).map_err(|e| CliError::Config(e.to_string()))?;
            if *test >= ds.len() {
                return Err(CliError::Config(format!("cannot hold out {test} of {} samples", ds.len())));
            }
            let cut = ds.len() - test;
            Ok(LoadedData {
                train: ds.slice(0..cut),
                test: ds.slice(cut..ds.len()),
                groups: Vec::new(),
                image: None,
            })
        }
    }
}

//! Run configuration: one JSON file per run, validated in full before any
//! data is read or any file is written.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gtn::data::{load_idx, load_sequence_csv, make_checkerboard, make_xor_features, split, Dataset};
use gtn::network::ArchitectureSpec;
use gtn::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub architecture: ArchitectureSpec,
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("run")
}

/// Where the three splits come from. Relative paths resolve against the
/// directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataConfig {
    /// IDX image/label pairs. Without explicit validation files, `n_val`
    /// samples are split off the training files with `split_seed`.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        val_images: Option<PathBuf>,
        #[serde(default)]
        val_labels: Option<PathBuf>,
        /// Caps the training set after the split.
        #[serde(default)]
        n_train: Option<usize>,
        #[serde(default)]
        n_val: Option<usize>,
        #[serde(default)]
        split_seed: u64,
    },
    /// Sequence CSV files.
    SequenceCsv {
        train: PathBuf,
        test: PathBuf,
        #[serde(default)]
        val: Option<PathBuf>,
        #[serde(default)]
        n_val: Option<usize>,
        #[serde(default)]
        split_seed: u64,
    },
    /// Generated XOR sets; the splits use seeds `seed`, `seed + 1`, `seed + 2`.
    Xor { n: usize, seed: u64 },
    /// Generated checkerboard sets, seeded like `xor`.
    Checkerboard { n: usize, cells: usize, seed: u64 },
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl RunConfig {
    /// Parses and validates; every failure here is a configuration error.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).context("malformed run config")?;
        cfg.architecture.validate().context("architecture")?;
        cfg.train.validate().context("train")?;
        cfg.data.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl DataConfig {
    fn validate(&self) -> Result<()> {
        match self {
            DataConfig::Idx { val_images, val_labels, .. } => {
                if val_images.is_some() != val_labels.is_some() {
                    bail!("data: val_images and val_labels go together");
                }
            }
            DataConfig::Xor { n, .. } if *n < 4 => bail!("data.n: xor sets need at least 4 samples"),
            DataConfig::Checkerboard { n, cells, .. } if *n < 4 || *cells < 2 => {
                bail!("data: checkerboard sets need n >= 4 and cells >= 2")
            }
            _ => {}
        }
        Ok(())
    }

    /// Reads or generates the splits; every failure here is a data error.
    pub fn load(&self, base: &Path) -> Result<Splits> {
        let at = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        let idx = |images: &PathBuf, labels: &PathBuf| {
            load_idx(at(images), at(labels)).with_context(|| format!("loading {}", at(images).display()))
        };
        let csv = |p: &PathBuf| load_sequence_csv(at(p)).with_context(|| format!("loading {}", at(p).display()));
        let (train, val, test) = match self {
            DataConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                val_images,
                val_labels,
                n_train,
                n_val,
                split_seed,
            } => {
                let full = idx(train_images, train_labels)?;
                let (train, val) = match (val_images, val_labels) {
                    (Some(vi), Some(vl)) => (full, idx(vi, vl)?),
                    _ => split_off(&full, *n_val, *split_seed)?,
                };
                let train = match n_train {
                    Some(n) if *n < train.len() => train.take(*n),
                    _ => train,
                };
                (train, val, idx(test_images, test_labels)?)
            }
            DataConfig::SequenceCsv {
                train,
                test,
                val,
                n_val,
                split_seed,
            } => {
                let full = csv(train)?;
                let (train, val) = match val {
                    Some(v) => (full, csv(v)?),
                    None => split_off(&full, *n_val, *split_seed)?,
                };
                (train, val, csv(test)?)
            }
            DataConfig::Xor { n, seed } => (
                make_xor_features(*n, *seed)?,
                make_xor_features(*n, seed.wrapping_add(1))?,
                make_xor_features(*n, seed.wrapping_add(2))?,
            ),
            DataConfig::Checkerboard { n, cells, seed } => (
                make_checkerboard(*n, *cells, *seed)?,
                make_checkerboard(*n, *cells, seed.wrapping_add(1))?,
                make_checkerboard(*n, *cells, seed.wrapping_add(2))?,
            ),
        };
        Ok(Splits { train, val, test })
    }
}

/// Splits `n_val` samples (a tenth by default) off `full`.
fn split_off(full: &Dataset, n_val: Option<usize>, seed: u64) -> Result<(Dataset, Dataset)> {
    let n_val = n_val.unwrap_or(full.len() / 10).max(1);
    if n_val >= full.len() {
        bail!("n_val = {n_val} leaves no training samples out of {}", full.len());
    }
    Ok(split(full, full.len() - n_val, n_val, seed)?)
}

/// Checks that a dataset can feed a model built from `spec`.
pub fn check_geometry(spec: &ArchitectureSpec, ds: &Dataset, what: &str) -> Result<()> {
    let sites = spec.sites();
    let len = ds.geometry().sample_len();
    if len != sites && len != sites * spec.feature_dim {
        bail!(
            "{what} samples hold {len} values; a {:?} grid needs {sites} scalars or {sites} x {} features",
            spec.grid,
            spec.feature_dim
        );
    }
    if ds.num_classes() > spec.num_classes {
        bail!("{what} has {} classes, the architecture {}", ds.num_classes(), spec.num_classes);
    }
    Ok(())
}

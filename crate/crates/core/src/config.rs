//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown or repeated
//! keys are errors. Recognized keys:
//!
//! | key | meaning |
//! |---|---|
//! | `seed` | network init and shuffle seed |
//! | `form` | `sac` or `plain` |
//! | `widths` | comma-separated output channels per conv layer |
//! | `epochs`, `batch`, `lr` | schedule |
//! | `lr_drop_at`, `lr_drop_factor` | one step decay after this fraction of epochs |
//! | `momentum`, `weight_decay` | SGD |
//! | `lambda`, `rmo.enabled`, `rmo.aggregation` | response-maximization term (`sum`/`mean`) |
//! | `lsc.enabled` | local shortcut kernels |
//! | `float_width` | `f32` or `f64` inference width recorded with the model |
//! | `dataset.kind` | `synthetic-blobs` or `idx` |
//! | `dataset.classes`, `dataset.train_samples`, `dataset.test_samples`, `dataset.size` | |
//! | `dataset.noise`, `dataset.scale_min`, `dataset.scale_max`, `dataset.seed` | |
//! | `dataset.blur_min`, `dataset.blur_max` | test-time blur range; omit for none |
//! | `dataset.train_images`, `dataset.train_labels`, `dataset.test_images`, `dataset.test_labels` | IDX paths |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{Blur, DatasetKind, DatasetSpec};
use crate::error::{Result, ScanError};
use crate::loss::Aggregation;
use crate::network::NetworkForm;
use crate::tensor::FloatWidth;
use crate::train::{NetConfig, TrainConfig};

const KEYS: &[&str] = &[
    "seed",
    "form",
    "widths",
    "epochs",
    "batch",
    "lr",
    "lr_drop_at",
    "lr_drop_factor",
    "momentum",
    "weight_decay",
    "lambda",
    "rmo.enabled",
    "rmo.aggregation",
    "lsc.enabled",
    "float_width",
    "dataset.kind",
    "dataset.classes",
    "dataset.train_samples",
    "dataset.test_samples",
    "dataset.size",
    "dataset.noise",
    "dataset.scale_min",
    "dataset.scale_max",
    "dataset.seed",
    "dataset.blur_min",
    "dataset.blur_max",
    "dataset.train_images",
    "dataset.train_labels",
    "dataset.test_images",
    "dataset.test_labels",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    /// CRC-32 of the normalized key/value set.
    pub hash: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            net: NetConfig::default(),
            train: TrainConfig::default(),
            dataset: DatasetSpec::default(),
            hash: 0,
        };
        cfg.hash = hash_entries(&BTreeMap::new());
        cfg
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse_with_base(&text, base)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_base(text, Path::new("."))
    }

    /// Relative IDX paths resolve against `base`.
    pub fn parse_with_base(text: &str, base: &Path) -> Result<Self> {
        let entries = parse_entries(text)?;
        let mut cfg = RunConfig::default();
        let mut blur_min = None;
        let mut blur_max = None;
        let mut idx_paths: [Option<PathBuf>; 4] = Default::default();
        let mut kind_idx = false;
        for (key, (line, value)) in &entries {
            let at = |e: String| ScanError::Config(format!("line {line}: {key}: {e}"));
            let t = &mut cfg.train;
            let d = &mut cfg.dataset;
            match key.as_str() {
                "seed" => t.seed = num(value).map_err(at)?,
                "form" => {
                    cfg.net.form = match value.as_str() {
                        "sac" => NetworkForm::Sac,
                        "plain" => NetworkForm::Absorbed,
                        _ => return Err(at(format!("expected sac or plain, got {value:?}"))),
                    }
                }
                "widths" => {
                    cfg.net.widths = value
                        .split(',')
                        .map(|w| num::<usize>(w.trim()))
                        .collect::<std::result::Result<_, _>>()
                        .map_err(at)?
                }
                "epochs" => t.epochs = num(value).map_err(at)?,
                "batch" => t.batch_size = num(value).map_err(at)?,
                "lr" => t.lr = num(value).map_err(at)?,
                "lr_drop_at" => t.lr_drop_at = num(value).map_err(at)?,
                "lr_drop_factor" => t.lr_drop_factor = num(value).map_err(at)?,
                "momentum" => t.sgd.momentum = num(value).map_err(at)?,
                "weight_decay" => t.sgd.weight_decay = num(value).map_err(at)?,
                "lambda" => t.rmo.lambda = num(value).map_err(at)?,
                "rmo.enabled" => t.rmo.enabled = flag(value).map_err(at)?,
                "rmo.aggregation" => {
                    t.rmo.aggregation = match value.as_str() {
                        "sum" => Aggregation::Sum,
                        "mean" => Aggregation::Mean,
                        _ => return Err(at(format!("expected sum or mean, got {value:?}"))),
                    }
                }
                "lsc.enabled" => t.lsc = flag(value).map_err(at)?,
                "float_width" => {
                    t.float_width = match value.as_str() {
                        "f32" => FloatWidth::F32,
                        "f64" => FloatWidth::F64,
                        _ => return Err(at(format!("expected f32 or f64, got {value:?}"))),
                    }
                }
                "dataset.kind" => {
                    kind_idx = match value.as_str() {
                        "synthetic-blobs" => false,
                        "idx" => true,
                        _ => return Err(at(format!("expected synthetic-blobs or idx, got {value:?}"))),
                    }
                }
                "dataset.classes" => d.classes = num(value).map_err(at)?,
                "dataset.train_samples" => d.train_samples = num(value).map_err(at)?,
                "dataset.test_samples" => d.test_samples = num(value).map_err(at)?,
                "dataset.size" => d.size = num(value).map_err(at)?,
                "dataset.noise" => d.noise = num(value).map_err(at)?,
                "dataset.scale_min" => d.scale_min = num(value).map_err(at)?,
                "dataset.scale_max" => d.scale_max = num(value).map_err(at)?,
                "dataset.seed" => d.seed = num(value).map_err(at)?,
                "dataset.blur_min" => blur_min = Some(num::<f64>(value).map_err(at)?),
                "dataset.blur_max" => blur_max = Some(num::<f64>(value).map_err(at)?),
                "dataset.train_images" => idx_paths[0] = Some(base.join(value)),
                "dataset.train_labels" => idx_paths[1] = Some(base.join(value)),
                "dataset.test_images" => idx_paths[2] = Some(base.join(value)),
                "dataset.test_labels" => idx_paths[3] = Some(base.join(value)),
                _ => unreachable!("keys are checked while parsing"),
            }
        }
        cfg.dataset.blur = match (blur_min, blur_max) {
            (None, None) => Blur::None,
            (Some(a), Some(b)) => Blur::Gaussian { t_min: a, t_max: b },
            (Some(a), None) | (None, Some(a)) => Blur::Gaussian { t_min: a, t_max: a },
        };
        if kind_idx {
            let [Some(ti), Some(tl), Some(vi), Some(vl)] = idx_paths else {
                return Err(ScanError::Config(
                    "dataset.kind = idx needs dataset.train_images, train_labels, test_images and test_labels".into(),
                ));
            };
            cfg.dataset.kind = DatasetKind::Idx {
                train_images: ti,
                train_labels: tl,
                test_images: vi,
                test_labels: vl,
            };
        } else if idx_paths.iter().any(Option::is_some) {
            return Err(ScanError::Config("IDX paths given but dataset.kind is not idx".into()));
        }
        if cfg.net.widths.is_empty() || cfg.net.widths.contains(&0) {
            return Err(ScanError::Config(format!("widths must be positive, got {:?}", cfg.net.widths)));
        }
        cfg.train.validate()?;
        cfg.dataset
            .validate()
            .map_err(|e| ScanError::Config(e.to_string()))?;
        cfg.hash = hash_entries(&entries);
        Ok(cfg)
    }
}

fn parse_entries(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut entries = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ScanError::Config(format!("line {}: expected key = value, got {line:?}", i + 1)));
        };
        let key = key.trim();
        let value = value.trim();
        if !KEYS.contains(&key) {
            return Err(ScanError::Config(format!("line {}: unknown key {key:?}", i + 1)));
        }
        if value.is_empty() {
            return Err(ScanError::Config(format!("line {}: {key} has no value", i + 1)));
        }
        if entries.insert(key.to_string(), (i + 1, value.to_string())).is_some() {
            return Err(ScanError::Config(format!("line {}: {key} given twice", i + 1)));
        }
    }
    Ok(entries)
}

fn hash_entries(entries: &BTreeMap<String, (usize, String)>) -> u64 {
    let mut h = crc32fast::Hasher::new();
    for (k, (_, v)) in entries {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    h.finalize() as u64
}

fn num<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("cannot parse {v:?}: {e}"))
}

fn flag(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

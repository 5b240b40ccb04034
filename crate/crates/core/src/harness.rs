//! Experiment orchestration: flat JSON configs with presets, seeded
//! multi-trial campaigns, and on-disk artifacts.
//!
//! Layout of a campaign rooted at `output_dir`:
//!
//! ```text
//! <output_dir>/<strategy>/seed-<net1>-<net2>-<shuffle>/
//!     metrics.csv  summary.json  net1.ckpt  [net2.ckpt]  noisy_labels.csv  [corrections.csv]
//! <output_dir>/<strategy>/aggregate.json
//! <output_dir>/comparison.csv
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{self, DataError, Dataset, SplitTag};
use crate::labels::{CorrectionSummary, LabelError};
use crate::losses::LossWeights;
use crate::metrics::{aggregate_trials, BoxStats, MetricsError, MetricsWriter, RunMetrics, RunSummary};
use crate::nn::{AdamConfig, NnError};
use crate::noise::{chi_squared_fit, corrupt_labels, ChiSquaredFit, CorruptionRecord, NoiseError, NoiseKind, NoiseModel};
use crate::trainers::{run_with, Seeds, Strategy, TrainConfig, TrainError};

/// Environment variable naming the default root for campaign outputs.
pub const OUTPUT_ROOT_ENV: &str = "NOISYLAB_OUTPUT_ROOT";
/// Environment variable naming the default MNIST directory for presets.
pub const MNIST_DIR_ENV: &str = "NOISYLAB_MNIST_DIR";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: unknown key `{key}`{}", suggestion_suffix(.suggestion))]
    UnknownKey {
        key: String,
        line: usize,
        suggestion: Option<String>,
    },
    #[error("{}: invalid value for `{key}`: {message}", line_prefix(*.line))]
    Type {
        key: String,
        line: Option<usize>,
        message: String,
    },
    #[error("missing required key `{0}`")]
    Missing(&'static str),
    #[error("{}: `{key}`: {message}", line_prefix(*.line))]
    Constraint {
        key: String,
        line: Option<usize>,
        message: String,
    },
    #[error("unknown preset `{name}`{}", suggestion_suffix(.suggestion))]
    UnknownPreset {
        name: String,
        suggestion: Option<String>,
    },
    #[error("`{key}`: {path} does not exist")]
    MissingResource { key: String, path: PathBuf },
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn suggestion_suffix(s: &Option<String>) -> String {
    s.as_ref()
        .map(|s| format!(" (did you mean `{s}`?)"))
        .unwrap_or_default()
}

fn line_prefix(line: Option<usize>) -> String {
    line.map_or_else(|| "config".to_owned(), |l| format!("line {l}"))
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Blobs {
        per_class: usize,
        classes: usize,
        dim: usize,
        spread: f64,
        seed: u64,
        train_fraction: f64,
        split_seed: u64,
    },
    /// MNIST from a directory of the four standard IDX files. With
    /// `holdout`, the 60k training file is split into 50k train and 10k
    /// test; otherwise the t10k files are the test set.
    Mnist {
        dir: PathBuf,
        holdout: bool,
        split_seed: u64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<(Dataset, Dataset), DataError> {
        match self {
            DatasetSpec::Blobs {
                per_class,
                classes,
                dim,
                spread,
                seed,
                train_fraction,
                split_seed,
            } => {
                let all = data::make_blobs(*per_class, *classes, *dim, *spread, *seed)?;
                data::split(&all, *train_fraction, *split_seed)
            }
            DatasetSpec::Mnist {
                dir,
                holdout,
                split_seed,
            } => {
                let (train, test) = data::load_mnist_dir(dir)?;
                if *holdout {
                    data::split(&train, 50_000.0 / 60_000.0, *split_seed)
                } else {
                    Ok((train, test))
                }
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = data::load_idx(train_images, train_labels, SplitTag::Train)?;
                let test = data::load_idx(test_images, test_labels, SplitTag::Test)?;
                Ok((train, test))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub ratio: f64,
    /// Trial `t` corrupts with seed `seed + t`.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentSpec {
    pub dataset: DatasetSpec,
    pub noise: NoiseSpec,
    pub train: TrainConfig,
    pub strategies: Vec<Strategy>,
    pub trials: Vec<Seeds>,
    pub output_dir: PathBuf,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[allow(dead_code)]
    preset: Option<String>,
    dataset: Option<String>,
    blobs_per_class: Option<usize>,
    blobs_classes: Option<usize>,
    blobs_dim: Option<usize>,
    blobs_spread: Option<f64>,
    blobs_seed: Option<u64>,
    train_fraction: Option<f64>,
    split_seed: Option<u64>,
    mnist_dir: Option<PathBuf>,
    mnist_holdout: Option<bool>,
    train_images: Option<PathBuf>,
    train_labels: Option<PathBuf>,
    test_images: Option<PathBuf>,
    test_labels: Option<PathBuf>,
    noise_kind: Option<NoiseKind>,
    noise_ratio: Option<f64>,
    noise_seed: Option<u64>,
    strategy: Option<Strategy>,
    strategies: Option<Vec<Strategy>>,
    epochs_total: Option<usize>,
    epochs_warmup: Option<usize>,
    epochs_finetune: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    lr_schedule: Option<Vec<(usize, f64)>>,
    forget_rate: Option<f64>,
    forget_horizon: Option<usize>,
    alpha: Option<f64>,
    beta: Option<f64>,
    xi: Option<f64>,
    mu: Option<f64>,
    lambda: Option<f64>,
    label_scale: Option<f64>,
    hidden: Option<Vec<usize>>,
    warmup_plain_ce: Option<bool>,
    trials: Option<Vec<[u64; 3]>>,
    num_trials: Option<usize>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
}

/// Every key accepted in a config file.
pub const CONFIG_KEYS: &[&str] = &[
    "preset",
    "dataset",
    "blobs_per_class",
    "blobs_classes",
    "blobs_dim",
    "blobs_spread",
    "blobs_seed",
    "train_fraction",
    "split_seed",
    "mnist_dir",
    "mnist_holdout",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "noise_kind",
    "noise_ratio",
    "noise_seed",
    "strategy",
    "strategies",
    "epochs_total",
    "epochs_warmup",
    "epochs_finetune",
    "batch_size",
    "learning_rate",
    "lr_schedule",
    "forget_rate",
    "forget_horizon",
    "alpha",
    "beta",
    "xi",
    "mu",
    "lambda",
    "label_scale",
    "hidden",
    "warmup_plain_ce",
    "trials",
    "num_trials",
    "seed",
    "output_dir",
];

fn closest<'a>(word: &str, candidates: impl IntoIterator<Item = &'a str>) -> Option<String> {
    candidates
        .into_iter()
        .map(|c| (strsim::jaro_winkler(word, c), c))
        .filter(|(score, _)| *score > 0.8)
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, c)| c.to_owned())
}

/// 1-based line of the first occurrence of `"key"` followed by a colon.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let needle = format!("\"{key}\"");
    text.lines().enumerate().find_map(|(i, line)| {
        let pos = line.find(&needle)?;
        line[pos + needle.len()..]
            .trim_start()
            .starts_with(':')
            .then_some(i + 1)
    })
}

/// The config key written on 1-based `line`, if any.
fn key_on_line(text: &str, line: usize) -> Option<String> {
    let l = text.lines().nth(line.checked_sub(1)?)?;
    CONFIG_KEYS
        .iter()
        .filter(|k| line_of(l, k).is_some())
        .max_by_key(|k| k.len())
        .map(|k| (*k).to_owned())
}

/// The noise settings of the MNIST grid with their label update step.
pub const MNIST_GRID: [(&str, NoiseKind, f64, f64); 5] = [
    ("sn02", NoiseKind::Symmetric, 0.2, 1000.0),
    ("sn04", NoiseKind::Symmetric, 0.4, 3000.0),
    ("sn08", NoiseKind::Symmetric, 0.8, 3000.0),
    ("pair02", NoiseKind::Pairflip, 0.2, 2000.0),
    ("pair045", NoiseKind::Pairflip, 0.45, 2500.0),
];

/// Strategies compared by the grid presets without a strategy suffix.
pub const GRID_STRATEGIES: [Strategy; 5] = [
    Strategy::Standard,
    Strategy::Coteaching,
    Strategy::CoteachingPlus,
    Strategy::Pencil,
    Strategy::Mlc,
];

/// Names of every shipped preset.
pub fn preset_names() -> Vec<String> {
    let mut names = vec!["blobs_sn04".to_owned()];
    for (tag, ..) in MNIST_GRID {
        names.push(format!("mnist_{tag}"));
        for s in Strategy::ALL {
            names.push(format!("mnist_{tag}_{s}"));
        }
    }
    names
}

/// Config keys set by a preset.
pub fn preset(name: &str) -> Option<Map<String, Value>> {
    if name == "blobs_sn04" {
        return Some(blobs_sn04());
    }
    let rest = name.strip_prefix("mnist_")?;
    let (tag, strategy) = match rest.split_once('_') {
        Some((tag, s)) => (tag, Some(s.parse::<Strategy>().ok()?)),
        None => (rest, None),
    };
    let &(_, kind, ratio, lambda) = MNIST_GRID.iter().find(|g| g.0 == tag)?;
    let mnist_dir = std::env::var_os(MNIST_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/mnist"));
    let mut m = serde_json::json!({
        "dataset": "mnist",
        "mnist_dir": mnist_dir,
        "mnist_holdout": false,
        "noise_kind": kind,
        "noise_ratio": ratio,
        "epochs_total": 320,
        "epochs_warmup": 30,
        "epochs_finetune": 180,
        "batch_size": 128,
        "lr_schedule": [[0, 1e-3], [140, 1e-4]],
        "forget_horizon": 10,
        "lambda": lambda,
        "label_scale": 10.0,
        "hidden": [256],
        "num_trials": 5,
    });
    let obj = m.as_object_mut().expect("object literal");
    match strategy {
        Some(s) => {
            obj.insert("strategy".into(), serde_json::to_value(s).expect("enum"));
        }
        None => {
            obj.insert("strategies".into(), serde_json::to_value(GRID_STRATEGIES).expect("enum"));
        }
    }
    Some(std::mem::take(obj))
}

/// Four Gaussian blobs with 40% symmetric noise and a 120-epoch schedule.
fn blobs_sn04() -> Map<String, Value> {
    let v = serde_json::json!({
        "dataset": "blobs",
        "blobs_per_class": 400,
        "blobs_classes": 4,
        "blobs_dim": 8,
        "blobs_spread": 0.4,
        "blobs_seed": 7,
        "train_fraction": 0.75,
        "split_seed": 11,
        "noise_kind": "symmetric",
        "noise_ratio": 0.4,
        "noise_seed": 13,
        "strategies": ["standard", "coteaching", "mlc"],
        "epochs_total": 120,
        "epochs_warmup": 10,
        "epochs_finetune": 60,
        "batch_size": 32,
        "lr_schedule": [[0, 1e-3], [60, 1e-4]],
        "forget_horizon": 10,
        "lambda": 100.0,
        "label_scale": 10.0,
        "hidden": [256],
        "num_trials": 3,
    });
    match v {
        Value::Object(m) => m,
        _ => unreachable!(),
    }
}

fn read_text(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Parses and validates a config file. Relative paths inside the config are
/// resolved against the file's directory; the default output directory is
/// `$NOISYLAB_OUTPUT_ROOT/<file stem>` (or `runs/<file stem>`).
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentSpec, ConfigError> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "experiment".into());
    let base = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut spec = parse_config_str(&text, &stem)?;
    if let Some(base) = base {
        spec.rebase(base);
    }
    spec.check_resources()?;
    Ok(spec)
}

fn rebase_path(p: &mut PathBuf, base: &Path) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentSpec {
    fn rebase(&mut self, base: &Path) {
        match &mut self.dataset {
            DatasetSpec::Blobs { .. } => {}
            DatasetSpec::Mnist { dir, .. } => rebase_path(dir, base),
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    rebase_path(p, base);
                }
            }
        }
    }

    /// Fails when a dataset file named by the experiment does not exist.
    pub fn check_resources(&self) -> Result<(), ConfigError> {
        let files: Vec<(&str, PathBuf)> = match &self.dataset {
            DatasetSpec::Blobs { .. } => Vec::new(),
            DatasetSpec::Mnist { dir, .. } => [
                data::MNIST_TRAIN_IMAGES,
                data::MNIST_TRAIN_LABELS,
                data::MNIST_TEST_IMAGES,
                data::MNIST_TEST_LABELS,
            ]
            .into_iter()
            .map(|f| ("mnist_dir", dir.join(f)))
            .collect(),
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => vec![
                ("train_images", train_images.clone()),
                ("train_labels", train_labels.clone()),
                ("test_images", test_images.clone()),
                ("test_labels", test_labels.clone()),
            ],
        };
        match files.into_iter().find(|(_, p)| !p.exists()) {
            Some((key, path)) => Err(ConfigError::MissingResource {
                key: key.into(),
                path,
            }),
            None => Ok(()),
        }
    }

    /// Directory of one trial's artifacts.
    pub fn trial_dir(&self, strategy: Strategy, seeds: &Seeds) -> PathBuf {
        self.output_dir
            .join(strategy.name())
            .join(format!("seed-{}-{}-{}", seeds.net1, seeds.net2, seeds.shuffle))
    }
}

/// Parses config text. `name` is used for the default output directory.
/// Dataset files are not checked.
pub fn parse_config_str(text: &str, name: &str) -> Result<ExperimentSpec, ConfigError> {
    let user: Map<String, Value> = match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(m)) => m,
        Ok(_) => {
            return Err(ConfigError::Syntax {
                line: 1,
                column: 1,
                message: "top level must be an object".into(),
            })
        }
        Err(e) => {
            return Err(ConfigError::Syntax {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })
        }
    };
    if let Some(key) = user.keys().find(|k| !CONFIG_KEYS.contains(&k.as_str())) {
        return Err(ConfigError::UnknownKey {
            key: key.clone(),
            line: line_of(text, key).unwrap_or(1),
            suggestion: closest(key, CONFIG_KEYS.iter().copied()),
        });
    }
    if let Err(e) = serde_json::from_str::<RawConfig>(text) {
        let key = key_on_line(text, e.line()).unwrap_or_else(|| "?".into());
        return Err(ConfigError::Type {
            key,
            line: Some(e.line()),
            message: strip_position(&e.to_string()),
        });
    }

    let mut merged = match user.get("preset") {
        Some(Value::String(p)) => preset(p).ok_or_else(|| ConfigError::UnknownPreset {
            name: p.clone(),
            suggestion: closest(p, preset_names().iter().map(String::as_str)),
        })?,
        _ => Map::new(),
    };
    merged.extend(user);
    let raw: RawConfig = serde_json::from_value(Value::Object(merged)).map_err(|e| ConfigError::Type {
        key: "preset".into(),
        line: line_of(text, "preset"),
        message: e.to_string(),
    })?;
    build_spec(raw, text, name)
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_owned(),
        None => msg.to_owned(),
    }
}

fn build_spec(raw: RawConfig, text: &str, name: &str) -> Result<ExperimentSpec, ConfigError> {
    let violation = |key: &str, message: String| ConfigError::Constraint {
        key: key.to_owned(),
        line: line_of(text, key),
        message,
    };

    let dataset = match raw.dataset.as_deref() {
        None => return Err(ConfigError::Missing("dataset")),
        Some("blobs") => DatasetSpec::Blobs {
            per_class: raw.blobs_per_class.unwrap_or(400),
            classes: raw.blobs_classes.unwrap_or(4),
            dim: raw.blobs_dim.unwrap_or(8),
            spread: raw.blobs_spread.unwrap_or(0.4),
            seed: raw.blobs_seed.unwrap_or(0),
            train_fraction: raw.train_fraction.unwrap_or(0.75),
            split_seed: raw.split_seed.unwrap_or(0),
        },
        Some("mnist") => DatasetSpec::Mnist {
            dir: raw.mnist_dir.clone().ok_or(ConfigError::Missing("mnist_dir"))?,
            holdout: raw.mnist_holdout.unwrap_or(false),
            split_seed: raw.split_seed.unwrap_or(0),
        },
        Some("idx") => DatasetSpec::Idx {
            train_images: raw.train_images.clone().ok_or(ConfigError::Missing("train_images"))?,
            train_labels: raw.train_labels.clone().ok_or(ConfigError::Missing("train_labels"))?,
            test_images: raw.test_images.clone().ok_or(ConfigError::Missing("test_images"))?,
            test_labels: raw.test_labels.clone().ok_or(ConfigError::Missing("test_labels"))?,
        },
        Some(other) => {
            return Err(violation(
                "dataset",
                format!("`{other}` is not one of blobs, mnist, idx"),
            ))
        }
    };
    if let DatasetSpec::Blobs {
        per_class,
        classes,
        dim,
        spread,
        train_fraction,
        ..
    } = &dataset
    {
        if *classes < 2 {
            return Err(violation("blobs_classes", "must be at least 2".into()));
        }
        if *per_class == 0 || *dim == 0 {
            return Err(violation("blobs_per_class", "blob sizes must be positive".into()));
        }
        if !(spread.is_finite() && *spread > 0.0) {
            return Err(violation("blobs_spread", "must be positive".into()));
        }
        if !(*train_fraction > 0.0 && *train_fraction < 1.0) {
            return Err(violation("train_fraction", "must lie in (0, 1)".into()));
        }
    }

    let ratio = raw.noise_ratio.ok_or(ConfigError::Missing("noise_ratio"))?;
    if !(0.0..1.0).contains(&ratio) {
        return Err(violation("noise_ratio", format!("{ratio} outside [0, 1)")));
    }
    let noise = NoiseSpec {
        kind: raw.noise_kind.unwrap_or(NoiseKind::Symmetric),
        ratio,
        seed: raw.noise_seed.unwrap_or(0),
    };

    let defaults = TrainConfig::default();
    let strategy = raw.strategy.unwrap_or(Strategy::Mlc);
    let strategies = match raw.strategies.clone() {
        Some(s) if s.is_empty() => return Err(violation("strategies", "must not be empty".into())),
        Some(s) => {
            let mut seen = HashSet::new();
            if let Some(dup) = s.iter().find(|x| !seen.insert(**x)) {
                return Err(violation("strategies", format!("`{dup}` listed twice")));
            }
            s
        }
        None => vec![strategy],
    };
    let lr_schedule = match (raw.lr_schedule.clone(), raw.learning_rate) {
        (Some(_), Some(_)) => {
            return Err(violation(
                "learning_rate",
                "give either learning_rate or lr_schedule, not both".into(),
            ))
        }
        (Some(s), None) => s,
        (None, Some(r)) => vec![(0, r)],
        (None, None) => defaults.lr_schedule.clone(),
    };
    let weights = LossWeights {
        alpha: raw.alpha.unwrap_or(defaults.weights.alpha),
        beta: raw.beta.unwrap_or(defaults.weights.beta),
        xi: raw.xi.unwrap_or(defaults.weights.xi),
        mu: raw.mu.unwrap_or(defaults.weights.mu),
    };
    let train = TrainConfig {
        strategy: strategies[0],
        epochs_total: raw.epochs_total.unwrap_or(defaults.epochs_total),
        epochs_warmup: raw.epochs_warmup.unwrap_or(defaults.epochs_warmup),
        epochs_finetune: raw.epochs_finetune.unwrap_or(defaults.epochs_finetune),
        batch_size: raw.batch_size.unwrap_or(defaults.batch_size),
        lr_schedule,
        forget_rate: raw.forget_rate.unwrap_or(ratio),
        forget_horizon: raw.forget_horizon.unwrap_or(defaults.forget_horizon),
        weights,
        lambda_step: raw.lambda.unwrap_or(defaults.lambda_step),
        label_scale: raw.label_scale.unwrap_or(defaults.label_scale),
        hidden: raw.hidden.clone().unwrap_or(defaults.hidden.clone()),
        seeds: defaults.seeds,
        warmup_plain_ce: raw.warmup_plain_ce.unwrap_or(false),
        adam: AdamConfig::default(),
    };
    if let Err(TrainError::Config(msg)) = train.validate() {
        let key = CONFIG_KEYS
            .iter()
            .filter(|k| msg.contains(*k))
            .max_by_key(|k| k.len())
            .copied()
            .unwrap_or_else(|| {
                if msg.contains("lambda") {
                    "lambda"
                } else if msg.contains("K ") {
                    "label_scale"
                } else if msg.contains("mu") {
                    "mu"
                } else {
                    "config"
                }
            });
        return Err(violation(key, msg));
    }

    let trials: Vec<Seeds> = match (raw.trials.clone(), raw.num_trials) {
        (Some(_), Some(_)) => {
            return Err(violation("num_trials", "give either trials or num_trials, not both".into()))
        }
        (Some(t), None) => t
            .into_iter()
            .map(|[net1, net2, shuffle]| Seeds {
                net1,
                net2,
                shuffle,
            })
            .collect(),
        (None, n) => {
            let base = raw.seed.unwrap_or(0);
            (0..n.unwrap_or(1) as u64)
                .map(|t| Seeds {
                    net1: base + 3 * t + 1,
                    net2: base + 3 * t + 2,
                    shuffle: base + 3 * t + 3,
                })
                .collect()
        }
    };
    if trials.is_empty() {
        return Err(violation(
            if raw.trials.is_some() { "trials" } else { "num_trials" },
            "at least one trial is required".into(),
        ));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = trials.iter().find(|s| !seen.insert(**s)) {
        return Err(violation(
            "trials",
            format!("seed triple [{}, {}, {}] repeated", dup.net1, dup.net2, dup.shuffle),
        ));
    }

    let output_dir = raw.output_dir.clone().unwrap_or_else(|| {
        std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(name)
    });

    Ok(ExperimentSpec {
        dataset,
        noise,
        train,
        strategies,
        trials,
        output_dir,
    })
}

/// Per-trial summary written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub strategy: Strategy,
    pub seeds: Seeds,
    pub noise_seed: u64,
    pub realized_noise_rate: f64,
    pub epochs: usize,
    pub summary: RunSummary,
    pub last10: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrections: Option<CorrectionSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialFailure {
    pub strategy: Strategy,
    pub seeds: Seeds,
    pub error: String,
}

/// Campaign-level statistics of one strategy, written as `aggregate.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyAggregate {
    pub strategy: Strategy,
    pub completed: usize,
    pub failed: usize,
    pub mean_best: f64,
    pub mean_last: f64,
    /// Pooled last-ten-epoch test accuracies of every completed trial.
    pub last10_box: Option<BoxStats>,
    pub trials: Vec<TrialSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CampaignReport {
    pub output_dir: PathBuf,
    pub aggregates: Vec<StrategyAggregate>,
    pub failures: Vec<TrialFailure>,
}

impl CampaignReport {
    pub fn succeeded(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn aggregate(&self, strategy: Strategy) -> Option<&StrategyAggregate> {
        self.aggregates.iter().find(|a| a.strategy == strategy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Upper bound on concurrently running trials.
    pub jobs: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: 1 }
    }
}

/// Noisy labels of every trial, in trial order.
pub fn trial_noise(spec: &ExperimentSpec, train: &Dataset) -> Result<Vec<CorruptionRecord>, HarnessError> {
    let model = NoiseModel::new(spec.noise.kind, spec.noise.ratio, train.num_classes())?;
    (0..spec.trials.len())
        .map(|t| Ok(corrupt_labels(train.labels(), &model, spec.noise.seed + t as u64)?))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn run_trial(
    spec: &ExperimentSpec,
    strategy: Strategy,
    trial: usize,
    train: &Dataset,
    test: &Dataset,
    record: &CorruptionRecord,
) -> Result<TrialSummary, HarnessError> {
    let seeds = spec.trials[trial];
    let cfg = TrainConfig {
        strategy,
        seeds,
        ..spec.train.clone()
    };
    let dir = spec.trial_dir(strategy, &seeds);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    record.write_csv(create(&dir.join("noisy_labels.csv"))?)?;

    let metrics_path = dir.join("metrics.csv");
    let mut writer = MetricsWriter::new(File::create(&metrics_path).map_err(io_err(&metrics_path))?)?;
    let out = run_with(&cfg, train, test, record, |rec| {
        writer
            .append(rec)
            .map_err(|e| TrainError::Observer(e.to_string()))
    })?;

    for (k, model) in out.models.iter().enumerate() {
        let path = dir.join(format!("net{}.ckpt", k + 1));
        let mut w = create(&path)?;
        model.write_checkpoint(&mut w)?;
        w.flush().map_err(io_err(&path))?;
    }
    if let Some(table) = &out.corrections {
        table.write_csv(create(&dir.join("corrections.csv"))?)?;
    }
    let summary = TrialSummary {
        strategy,
        seeds,
        noise_seed: spec.noise.seed + trial as u64,
        realized_noise_rate: record.realized_rate(),
        epochs: cfg.epochs_total,
        summary: out.metrics.summary().expect("epoch 0 is always recorded"),
        last10: out.metrics.last10(),
        corrections: out.corrections.map(|t| t.summary),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

fn aggregate_strategy(
    strategy: Strategy,
    results: Vec<Result<TrialSummary, TrialFailure>>,
) -> (StrategyAggregate, Vec<TrialFailure>) {
    let (mut trials, mut failures) = (Vec::new(), Vec::new());
    for r in results {
        match r {
            Ok(t) => trials.push(t),
            Err(f) => failures.push(f),
        }
    }
    let n = trials.len().max(1) as f64;
    let pooled: Vec<f64> = trials.iter().flat_map(|t| t.last10.iter().copied()).collect();
    let agg = StrategyAggregate {
        strategy,
        completed: trials.len(),
        failed: failures.len(),
        mean_best: trials.iter().map(|t| t.summary.best_acc).sum::<f64>() / n,
        mean_last: trials.iter().map(|t| t.summary.last10_mean_acc).sum::<f64>() / n,
        last10_box: BoxStats::from_values(&pooled).ok(),
        trials,
    };
    (agg, failures)
}

/// Runs every (strategy, trial) pair of the experiment. Trials of one campaign
/// share the corrupted labels of their trial index across strategies.
/// Individual trial failures are recorded in the report; the error path is
/// reserved for problems that stop the whole campaign.
pub fn run_experiment(spec: &ExperimentSpec, opts: RunOptions) -> Result<CampaignReport, HarnessError> {
    let (train, test) = spec.dataset.load()?;
    let noise = trial_noise(spec, &train)?;
    fs::create_dir_all(&spec.output_dir).map_err(io_err(&spec.output_dir))?;

    let tasks: Vec<(Strategy, usize)> = spec
        .strategies
        .iter()
        .flat_map(|&s| (0..spec.trials.len()).map(move |t| (s, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| HarnessError::Pool(e.to_string()))?;
    let results: Vec<Result<TrialSummary, TrialFailure>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(s, t)| {
                run_trial(spec, s, t, &train, &test, &noise[t]).map_err(|e| TrialFailure {
                    strategy: s,
                    seeds: spec.trials[t],
                    error: e.to_string(),
                })
            })
            .collect()
    });

    let mut by_strategy: BTreeMap<usize, Vec<_>> = BTreeMap::new();
    for ((s, _), r) in tasks.iter().zip(results) {
        let pos = spec.strategies.iter().position(|x| x == s).expect("listed strategy");
        by_strategy.entry(pos).or_default().push(r);
    }
    let mut report = CampaignReport {
        output_dir: spec.output_dir.clone(),
        aggregates: Vec::new(),
        failures: Vec::new(),
    };
    for (pos, results) in by_strategy {
        let strategy = spec.strategies[pos];
        let (agg, failures) = aggregate_strategy(strategy, results);
        let dir = spec.output_dir.join(strategy.name());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write_json(&dir.join("aggregate.json"), &agg)?;
        report.aggregates.push(agg);
        report.failures.extend(failures);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub trials: usize,
    pub mean_best: f64,
    pub mean_last: f64,
    pub median_last: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub report: CampaignReport,
}

impl Comparison {
    pub fn row(&self, strategy: Strategy) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| HarnessError::Metrics(MetricsError::from(e));
        w.write_record(["strategy", "trials", "mean_best", "mean_last", "median_last"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.strategy.name().to_owned(),
                r.trials.to_string(),
                r.mean_best.to_string(),
                r.mean_last.to_string(),
                r.median_last.map(|m| m.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| csv_err(e.into()))?;
        Ok(())
    }
}

/// Runs one campaign per strategy on identical noisy labels and writes
/// `comparison.csv` into the output directory.
pub fn compare_strategies(
    template: &ExperimentSpec,
    strategies: &[Strategy],
    opts: RunOptions,
) -> Result<Comparison, HarnessError> {
    let spec = ExperimentSpec {
        strategies: strategies.to_vec(),
        ..template.clone()
    };
    let report = run_experiment(&spec, opts)?;
    let rows = report
        .aggregates
        .iter()
        .map(|a| ComparisonRow {
            strategy: a.strategy,
            trials: a.completed,
            mean_best: a.mean_best,
            mean_last: a.mean_last,
            median_last: a.last10_box.map(|b| b.median),
        })
        .collect();
    let cmp = Comparison { rows, report };
    let path = spec.output_dir.join("comparison.csv");
    cmp.write_csv(create(&path)?)?;
    Ok(cmp)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseCheck {
    pub trial: usize,
    pub noise_seed: u64,
    pub examples: usize,
    pub target_ratio: f64,
    pub realized_rate: f64,
    /// `3 * sqrt(ratio * (1 - ratio) / N)`.
    pub three_sigma: f64,
    pub fit: ChiSquaredFit,
}

/// Corrupts the training labels of every trial without training and
/// reports how closely the realized noise follows the transition matrix.
pub fn noise_check(spec: &ExperimentSpec) -> Result<Vec<NoiseCheck>, HarnessError> {
    let (train, _) = spec.dataset.load()?;
    let model = NoiseModel::new(spec.noise.kind, spec.noise.ratio, train.num_classes())?;
    let records = trial_noise(spec, &train)?;
    let n = train.len() as f64;
    let r = spec.noise.ratio;
    Ok(records
        .iter()
        .enumerate()
        .map(|(trial, rec)| NoiseCheck {
            trial,
            noise_seed: spec.noise.seed + trial as u64,
            examples: rec.len(),
            target_ratio: r,
            realized_rate: rec.realized_rate(),
            three_sigma: 3.0 * (r * (1.0 - r) / n).sqrt(),
            fit: chi_squared_fit(rec, &model),
        })
        .collect())
}

/// Aggregate of metrics files already on disk.
pub fn aggregate_metrics_files(paths: &[PathBuf]) -> Result<BoxStats, HarnessError> {
    let runs = paths
        .iter()
        .map(|p| {
            let f = File::open(p).map_err(io_err(p))?;
            Ok(RunMetrics::read_csv(f)?)
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;
    Ok(aggregate_trials(&runs)?)
}

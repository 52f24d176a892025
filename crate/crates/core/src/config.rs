//! Flat `key = value` experiment configuration.
//!
//! Lines starting with `#` are comments. Lists are comma separated. Unknown and
//! repeated keys are rejected.
//!
//! ```text
//! seed = 0
//! model.preset = tsra
//! data.source = synthetic
//! train.epochs = 8
//! cob.mode = both
//! schedule.ratios = 0.3, 0.5, 0.7
//! schedule.threshold.zscore = -1, 0, 1
//! output.dir = out
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{MiniVggWidths, Preset};
use crate::pruning::{Schedule, ThresholdKind};
use crate::train::{OptimizerKind, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Seeded procedural images; `test_per_class` samples per class come from a
    /// separate seed.
    Synthetic { n_per_class: usize, test_per_class: usize },
    /// CIFAR-10 binary directory, optionally truncated to the first samples.
    Cifar10 {
        path: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
}

/// Which variants of the sweep to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CobMode {
    Off,
    On,
    Both,
}

impl CobMode {
    pub fn variants(&self) -> &'static [bool] {
        match self {
            CobMode::Off => &[false],
            CobMode::On => &[true],
            CobMode::Both => &[false, true],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub command: String,
    pub seed: u64,
    pub preset: Preset,
    pub widths: MiniVggWidths,
    pub data: DataSource,
    pub train: TrainConfig,
    pub cob: CobMode,
    pub n_capture: usize,
    pub ratios: Vec<f64>,
    /// Threshold sweeps, ordered by rule name.
    pub thresholds: Vec<(ThresholdKind, Vec<f64>)>,
    pub output_dir: PathBuf,
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            command: "experiment".into(),
            seed: 0,
            preset: Preset::Tsra,
            widths: MiniVggWidths::default(),
            data: DataSource::Synthetic {
                n_per_class: 200,
                test_per_class: 50,
            },
            train: TrainConfig {
                epochs: 8,
                finetune: true,
                finetune_epochs: 2,
                ..TrainConfig::adamw()
            },
            cob: CobMode::Both,
            n_capture: 512,
            ratios: vec![0.3, 0.5, 0.7],
            thresholds: Vec::new(),
            output_dir: PathBuf::from("out"),
            parallel: false,
        }
    }
}

pub const OUTPUT_DIR_ENV: &str = "COBP_OUTPUT_DIR";

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

/// Splits the text into an ordered key map, rejecting malformed and repeated lines.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key = value, got {line:?}", no + 1)))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(Error::config(format!("line {}: duplicate key {k:?}", no + 1)));
        }
    }
    Ok(out)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut c = Self::default();
        let mut optimizer_set = false;
        let mut overrides: Vec<(&str, &str)> = Vec::new();
        let (mut n_per_class, mut test_per_class) = (200usize, 50usize);
        let mut source = "synthetic".to_string();
        let mut path: Option<PathBuf> = None;
        let (mut train_limit, mut test_limit) = (None, None);
        for (k, v) in &pairs {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "command" => c.command = v.to_string(),
                "seed" => c.seed = parse_num(k, v)?,
                "model.preset" => c.preset = Preset::parse(v)?,
                "model.widths" => {
                    let w: Vec<usize> = parse_list(k, v)?;
                    c.widths.stages = w
                        .try_into()
                        .map_err(|_| Error::config("model.widths needs exactly three stage widths"))?;
                }
                "model.hidden" => c.widths.hidden = parse_num(k, v)?,
                "data.source" => source = v.to_string(),
                "data.path" => path = Some(PathBuf::from(v)),
                "data.n_per_class" => n_per_class = parse_num(k, v)?,
                "data.test_per_class" => test_per_class = parse_num(k, v)?,
                "data.train_limit" => train_limit = Some(parse_num(k, v)?),
                "data.test_limit" => test_limit = Some(parse_num(k, v)?),
                "train.optimizer" => {
                    c.train = TrainConfig {
                        epochs: c.train.epochs,
                        finetune: c.train.finetune,
                        finetune_epochs: c.train.finetune_epochs,
                        ..TrainConfig::for_optimizer(OptimizerKind::parse(v)?)
                    };
                    optimizer_set = true;
                }
                "train.lr" | "train.momentum" | "train.beta2" | "train.eps" | "train.weight_decay" | "train.epochs"
                | "train.batch_size" | "train.cosine" | "train.finetune" | "train.finetune_epochs" => {
                    overrides.push((k, v))
                }
                "cob.mode" => {
                    c.cob = match v {
                        "off" | "false" => CobMode::Off,
                        "on" | "true" => CobMode::On,
                        "both" => CobMode::Both,
                        _ => return Err(Error::config(format!("cob.mode: expected off, on or both, got {v:?}"))),
                    }
                }
                "cob.n_capture" => c.n_capture = parse_num(k, v)?,
                "schedule.ratios" => c.ratios = parse_list(k, v)?,
                "output.dir" => c.output_dir = PathBuf::from(v),
                "sweep.parallel" => c.parallel = parse_bool(k, v)?,
                _ => {
                    if let Some(rule) = k.strip_prefix("schedule.threshold.") {
                        let kind = ThresholdKind::parse(rule)?;
                        c.thresholds.push((kind, parse_list(k, v)?));
                    } else {
                        return Err(Error::config(format!("unknown key {k:?}")));
                    }
                }
            }
        }
        if !optimizer_set {
            let opt = match c.preset {
                Preset::ReluControl => OptimizerKind::SgdNesterov,
                Preset::Tsra => OptimizerKind::AdamW,
            };
            c.train = TrainConfig {
                epochs: c.train.epochs,
                finetune: c.train.finetune,
                finetune_epochs: c.train.finetune_epochs,
                ..TrainConfig::for_optimizer(opt)
            };
        }
        for (k, v) in overrides {
            let t = &mut c.train;
            match k {
                "train.lr" => t.lr = parse_num(k, v)?,
                "train.momentum" => t.momentum = parse_num(k, v)?,
                "train.beta2" => t.beta2 = parse_num(k, v)?,
                "train.eps" => t.eps = parse_num(k, v)?,
                "train.weight_decay" => t.weight_decay = parse_num(k, v)?,
                "train.epochs" => t.epochs = parse_num(k, v)?,
                "train.batch_size" => t.batch_size = parse_num(k, v)?,
                "train.cosine" => t.cosine = parse_bool(k, v)?,
                "train.finetune" => t.finetune = parse_bool(k, v)?,
                "train.finetune_epochs" => t.finetune_epochs = parse_num(k, v)?,
                _ => unreachable!(),
            }
        }
        c.train.seed = c.seed;
        c.data = match source.as_str() {
            "synthetic" => DataSource::Synthetic {
                n_per_class,
                test_per_class,
            },
            "cifar10" => DataSource::Cifar10 {
                path: path.ok_or_else(|| Error::config("data.source = cifar10 needs data.path"))?,
                train_limit,
                test_limit,
            },
            other => return Err(Error::config(format!("data.source: unknown source {other:?}"))),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let DataSource::Synthetic {
            n_per_class,
            test_per_class,
        } = self.data
        {
            if n_per_class == 0 || test_per_class == 0 {
                return Err(Error::config("synthetic data needs at least one sample per class"));
            }
        }
        if self.n_capture == 0 {
            return Err(Error::config("cob.n_capture must be positive"));
        }
        Schedule::FixedRatio(self.ratios.clone()).settings()?;
        for (kind, values) in &self.thresholds {
            Schedule::Threshold {
                kind: *kind,
                values: values.clone(),
            }
            .settings()?;
        }
        Ok(())
    }

    /// `COBP_OUTPUT_DIR` overrides `output.dir` when set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}

//! One merged configuration for every command, resolved in three layers:
//! built-in defaults, then an optional `key = value` file, then command-line
//! flags. Each key remembers which layer set it.
//!
//! File syntax: one `key = value` per line, `#` starts a comment, blank
//! lines ignored. Keys are exactly the flat field names below.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::DatasetSpec;
use crate::error::{CoreError, Result};
use crate::net::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Default,
    File,
    Flag,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Default => "default",
            Provenance::File => "file",
            Provenance::Flag => "flag",
        }
    }
}

pub const KEYS: &[&str] = &[
    "lr",
    "momentum",
    "epochs",
    "batch_size",
    "seed",
    "dfm",
    "dfm_slots",
    "alpha",
    "beta",
    "omega",
    "delta",
    "gamma",
    "tau",
    "apply_mode",
    "active_in_eval",
    "variant",
    "num_classes",
    "train_per_class",
    "test_per_class",
    "image_size",
    "clutter_max",
    "clutter_lo",
    "clutter_hi",
    "theta_seg",
    "out",
    "data",
];

/// Everything a run needs, plus where each value came from.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// `false` trains the plain baseline (the `--no-dfm` switch).
    pub dfm_enabled: bool,
    pub dataset: DatasetSpec,
    /// CAM segmentation threshold on the normalized heatmap.
    pub theta_seg: f64,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    provenance: BTreeMap<&'static str, Provenance>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            dfm_enabled: true,
            dataset: DatasetSpec::default(),
            theta_seg: 0.20,
            out: None,
            data: None,
            provenance: KEYS.iter().map(|&k| (k, Provenance::Default)).collect(),
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CoreError::Config(format!("cannot parse {key} from {value:?}")))
}

impl RunConfig {
    /// Where the current value of `key` came from.
    pub fn provenance(&self, key: &str) -> Option<Provenance> {
        self.provenance.get(key).copied()
    }

    /// Set one key from its text form, recording the layer that set it.
    pub fn set(&mut self, key: &str, value: &str, from: Provenance) -> Result<()> {
        let canonical = KEYS
            .iter()
            .find(|&&k| k == key)
            .ok_or_else(|| CoreError::Config(format!("unknown config key {key:?}")))?;
        match key {
            "lr" => self.train.lr = parse_as(key, value)?,
            "momentum" => self.train.momentum = parse_as(key, value)?,
            "epochs" => self.train.epochs = parse_as(key, value)?,
            "batch_size" => self.train.batch_size = parse_as(key, value)?,
            "seed" => {
                let seed: u64 = parse_as(key, value)?;
                self.train.seed = seed;
                self.dataset.seed = seed;
            }
            "dfm" => self.dfm_enabled = parse_as(key, value)?,
            "dfm_slots" => self.train.dfm_slots = parse_as(key, value)?,
            "alpha" => self.train.dfm.alpha = parse_as(key, value)?,
            "beta" => self.train.dfm.beta = parse_as(key, value)?,
            "omega" => self.train.dfm.omega = parse_as(key, value)?,
            "delta" => self.train.dfm.delta = parse_as(key, value)?,
            "gamma" => self.train.dfm.gamma = parse_as(key, value)?,
            "tau" => self.train.dfm.tau = parse_as(key, value)?,
            "apply_mode" => self.train.dfm.apply_mode = parse_as(key, value)?,
            "active_in_eval" => self.train.dfm.active_in_eval = parse_as(key, value)?,
            "variant" => self.train.dfm.variant = parse_as(key, value)?,
            "num_classes" => self.dataset.num_classes = parse_as(key, value)?,
            "train_per_class" => self.dataset.train_per_class = parse_as(key, value)?,
            "test_per_class" => self.dataset.test_per_class = parse_as(key, value)?,
            "image_size" => self.dataset.image_size = parse_as(key, value)?,
            "clutter_max" => self.dataset.clutter_max = parse_as(key, value)?,
            "clutter_lo" => self.dataset.clutter_intensity.0 = parse_as(key, value)?,
            "clutter_hi" => self.dataset.clutter_intensity.1 = parse_as(key, value)?,
            "theta_seg" => self.theta_seg = parse_as(key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            "data" => self.data = Some(PathBuf::from(value)),
            _ => unreachable!("key list covers every match arm"),
        }
        self.provenance.insert(canonical, from);
        Ok(())
    }

    /// Layer a config file over the current values.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CoreError::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CoreError::Config(format!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(k.trim(), v.trim(), Provenance::File)?;
        }
        Ok(())
    }

    /// Check every invariant before any command does real work.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.dataset.validate()?;
        if !(self.theta_seg > 0.0 && self.theta_seg < 1.0) {
            return Err(CoreError::Config(format!(
                "theta_seg must be in (0,1), got {}",
                self.theta_seg
            )));
        }
        Ok(())
    }

    /// The training config a run should actually use: disabling the module
    /// empties both insertion slots.
    pub fn effective_train(&self) -> TrainConfig {
        let mut t = self.train.clone();
        if !self.dfm_enabled {
            t.dfm_slots = crate::net::DfmSlots::NONE;
        }
        t
    }
}

//! Run configuration: a TOML file merged with command-line overrides.
//!
//! Precedence, highest first: flags, the config file, `POSEREG_OUT` (output
//! root only), built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use posereg::data::PreprocessConfig;
use posereg::loss::TemporalConfig;
use posereg::model::ModelConfig;
use posereg::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const OUT_ENV: &str = "POSEREG_OUT";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    /// A manifest file listing `sequence_id frame_index image pose`.
    #[default]
    Manifest,
    /// A directory of `seq-XX` folders with split files.
    SevenScenes,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub format: DataFormat,
    /// Manifest file, or dataset root for `seven-scenes`.
    pub train: Option<PathBuf>,
    /// Evaluation data; defaults to the training data.
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: Option<PathBuf>,
    /// Recorded for reproducibility; every run is single-threaded.
    pub deterministic: bool,
    /// Checkpoint whose encoder weights initialize the model when
    /// `model.encoder.pretrained` is set.
    pub pretrained_weights: Option<PathBuf>,
    pub data: DataSection,
    pub model: ModelConfig,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
}

/// Flag values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub temporal: bool,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        // relative paths in a config file are relative to the file; the
        // resolved config holds absolute paths so its echo can be re-run
        let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
        let base = std::path::absolute(parent.unwrap_or_else(|| Path::new(".")))
            .with_context(|| format!("resolving {}", path.display()))?;
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        rebase(&mut cfg.data.train);
        rebase(&mut cfg.data.test);
        rebase(&mut cfg.out);
        rebase(&mut cfg.pretrained_weights);
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides, verb: &str) {
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        let out = self.out.take().unwrap_or_else(|| {
            std::env::var_os(OUT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("runs"))
                .join(verb)
        });
        self.out = Some(std::path::absolute(&out).unwrap_or(out));
        if let Some(seed) = o.seed {
            self.train.seed = seed;
        }
        self.deterministic |= o.deterministic;
        if o.temporal && self.train.temporal.is_none() {
            self.train.temporal = Some(TemporalConfig::default());
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(b) = o.batch_size {
            self.train.batch_size = b;
        }
    }

    pub fn out_dir(&self) -> &Path {
        self.out.as_deref().expect("resolved")
    }

    /// Checks everything a training run needs before any output is written.
    pub fn validate_for_training(&self) -> Result<()> {
        self.model.validate()?;
        self.preprocess.validate()?;
        self.train.validate()?;
        if self.preprocess.crop as usize != self.model.input_size {
            bail!(
                "preprocess.crop ({}) must equal model.input_size ({})",
                self.preprocess.crop,
                self.model.input_size
            );
        }
        if self.model.encoder.pretrained && self.pretrained_weights.is_none() {
            bail!("model.encoder.pretrained is set but pretrained_weights is missing");
        }
        self.train_path()?;
        self.test_path()?;
        Ok(())
    }

    pub fn train_path(&self) -> Result<&Path> {
        let p = self
            .data
            .train
            .as_deref()
            .context("data.train is not set")?;
        if !p.exists() {
            bail!("dataset path {} does not exist", p.display());
        }
        Ok(p)
    }

    pub fn test_path(&self) -> Result<&Path> {
        match self.data.test.as_deref() {
            Some(p) if !p.exists() => bail!("dataset path {} does not exist", p.display()),
            Some(p) => Ok(p),
            None => self.train_path(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

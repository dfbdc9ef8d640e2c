//! Run configuration read from TOML files.
//!
//! Every key has a default; values in the file override the defaults and
//! command-line flags override the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::ConditionedConfig;
use crate::mixsim::{BuildOptions, Segmentation};
use crate::pipeline::PipelineOptions;
use crate::separator::SeparatorConfig;
use crate::stop::StopClassifierConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub speakers: usize,
    pub count: usize,
    pub segmentation: Segmentation,
    pub snr_range_db: (f64, f64),
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let build = BuildOptions::default();
        SimulateConfig {
            speakers: 2,
            count: 100,
            segmentation: build.segmentation,
            snr_range_db: build.snr_range_db,
        }
    }
}

/// Input locations; relative paths resolve against the working directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Corpus root with one directory of utterances per speaker.
    pub corpus: Option<PathBuf>,
    /// Training manifests; fine-tuning uses the 3-speaker ones.
    pub train: Vec<PathBuf>,
    pub valid: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    pub stage1: Option<PathBuf>,
    pub stop: Option<PathBuf>,
    pub stage2: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds simulation, initialization and batch shuffling.
    pub seed: u64,
    /// Forces single-threaded execution.
    pub deterministic: bool,
    pub workers: usize,
    pub out: PathBuf,
    pub paths: Paths,
    pub simulate: SimulateConfig,
    pub separator: SeparatorConfig,
    /// Stage-1 training and fine-tuning.
    pub train: TrainConfig,
    pub stop: StopClassifierConfig,
    pub stop_train: TrainConfig,
    pub stage2: ConditionedConfig,
    pub stage2_train: TrainConfig,
    pub pipeline: PipelineOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            deterministic: false,
            workers: 1,
            out: PathBuf::from("out"),
            paths: Paths::default(),
            simulate: SimulateConfig::default(),
            separator: SeparatorConfig::default(),
            train: TrainConfig::default(),
            stop: StopClassifierConfig::default(),
            stop_train: TrainConfig {
                initial_lr: 3e-3,
                batch_size: 16,
                ..TrainConfig::default()
            },
            stage2: ConditionedConfig::default(),
            stage2_train: TrainConfig::default(),
            pipeline: PipelineOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::ConfigKey {
            path: path.to_owned(),
            key: String::new(),
            reason: e.message().to_owned(),
        })?;
        serde_path_to_error::deserialize(de).map_err(|e| Error::ConfigKey {
            path: path.to_owned(),
            key: e.path().to_string(),
            reason: e.inner().message().to_owned(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Worker threads after applying the deterministic flag.
    pub fn effective_workers(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.workers.max(1)
        }
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            segmentation: self.simulate.segmentation,
            snr_range_db: self.simulate.snr_range_db,
            workers: self.effective_workers(),
        }
    }

    /// Training configs with the run seed applied.
    pub fn seeded(&self, cfg: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..cfg.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.separator.validate()?;
        self.train.validate()?;
        self.stop.validate()?;
        self.stop_train.validate()?;
        self.stage2.validate()?;
        self.stage2_train.validate()?;
        if self.separator.num_outputs != 2 {
            return Err(Error::Config("the stage-1 separator needs num_outputs = 2".into()));
        }
        if self.pipeline.max_iterations == 0 {
            return Err(Error::Config("pipeline.max_iterations must be positive".into()));
        }
        Ok(())
    }
}

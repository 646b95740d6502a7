use std::path::PathBuf;

use serde::Deserialize;

use crate::data::SyntheticSpec;
use crate::protocol::{Algorithm, LocalTraining, ProtocolConfig};
use crate::schedule::ScheduleKind;
use crate::sparsify::{SparsifyConfig, SparsifyMode};
use crate::tensor::OptimizerKind;

use super::{HarnessError, Result};

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "FSFL_SEED";

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub protocol: ProtocolSection,
    pub train: TrainSection,
    pub scaling: ScalingSection,
    pub sparsify: SparsifySection,
    pub codec: CodecSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            model: ModelSection::default(),
            protocol: ProtocolSection::default(),
            train: TrainSection::default(),
            scaling: ScalingSection::default(),
            sparsify: SparsifySection::default(),
            codec: CodecSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[serde(alias = "synthetic_gaussian_blobs")]
    Synthetic,
    #[serde(alias = "small_image_set")]
    ImageArchive,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    pub classes: usize,
    pub samples_per_class: usize,
    pub image: [usize; 3],
    pub gratings: usize,
    pub noise: f64,
    pub max_shift: usize,
    /// Record files of an image archive.
    pub files: Vec<PathBuf>,
    /// train:val:test
    pub splits: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            source: DataSource::Synthetic,
            classes: s.classes,
            samples_per_class: s.samples_per_class,
            image: s.shape,
            gratings: s.gratings,
            noise: s.noise,
            max_shift: s.max_shift,
            files: Vec::new(),
            splits: [0.7, 0.15, 0.15],
        }
    }
}

impl DataSection {
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            samples_per_class: self.samples_per_class,
            shape: self.image,
            gratings: self.gratings,
            noise: self.noise,
            max_shift: self.max_shift,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "vgg11_thinned".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub algorithm: Algorithm,
    pub num_clients: usize,
    pub epochs: usize,
    pub scaling_epochs: usize,
    pub bidirectional: bool,
    pub partial_update: bool,
    pub residuals: bool,
    pub stc_scaling: bool,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        let p = ProtocolConfig::default();
        Self {
            algorithm: p.algorithm,
            num_clients: p.num_clients,
            epochs: p.epochs,
            scaling_epochs: p.scaling_epochs,
            bidirectional: p.bidirectional,
            partial_update: p.partial_update,
            residuals: p.residuals,
            stc_scaling: p.stc_scaling,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

fn optimizer(name: OptimizerName, momentum: f64) -> OptimizerKind {
    match name {
        OptimizerName::Adam => OptimizerKind::adam(),
        OptimizerName::Sgd => OptimizerKind::SgdMomentum { momentum },
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub optimizer: OptimizerName,
    pub lr: f64,
    pub momentum: f64,
    pub flip: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let l = LocalTraining::default();
        Self {
            batch_size: l.batch_size,
            optimizer: OptimizerName::Adam,
            lr: l.weight_lr,
            momentum: 0.9,
            flip: l.flip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingSection {
    pub optimizer: OptimizerName,
    pub momentum: f64,
    pub schedule: ScheduleKind,
    pub lr_max: f64,
    pub lr_min: f64,
}

impl Default for ScalingSection {
    fn default() -> Self {
        let l = LocalTraining::default();
        Self {
            optimizer: OptimizerName::Adam,
            momentum: 0.9,
            schedule: l.scaling_schedule,
            lr_max: l.scaling_lr_max,
            lr_min: l.scaling_lr_min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparsifySection {
    pub mode: SparsifyMode,
    pub delta: f64,
    pub gamma: f64,
    pub rate: f64,
}

impl Default for SparsifySection {
    fn default() -> Self {
        let s = SparsifyConfig::default();
        Self {
            mode: s.mode,
            delta: s.delta,
            gamma: s.gamma,
            rate: s.rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    pub step_size_unidirectional: f64,
    pub step_size_bidirectional: f64,
    pub step_size_other: f64,
}

impl Default for CodecSection {
    fn default() -> Self {
        let p = ProtocolConfig::default();
        Self {
            step_size_unidirectional: p.step_size_unidirectional,
            step_size_bidirectional: p.step_size_bidirectional,
            step_size_other: p.step_size_other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Round log destination.
    pub csv: Option<PathBuf>,
    /// Final server parameters.
    pub checkpoint: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses TOML; unknown or mistyped keys are reported with their path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| HarnessError::Config {
            path: String::new(),
            message: e.to_string(),
        })?;
        serde_path_to_error::deserialize(de).map_err(|e| HarnessError::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))?;
        Self::from_toml(&text)
    }

    /// Replaces the seed with the value of [`SEED_ENV`] when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| HarnessError::Config {
                path: SEED_ENV.into(),
                message: format!("`{v}` is not an unsigned integer"),
            })?;
        }
        Ok(())
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        let p = &self.protocol;
        ProtocolConfig {
            algorithm: p.algorithm,
            num_clients: p.num_clients,
            epochs: p.epochs,
            scaling_epochs: p.scaling_epochs,
            bidirectional: p.bidirectional,
            partial_update: p.partial_update,
            residuals: p.residuals,
            stc_scaling: p.stc_scaling,
            sparsify: SparsifyConfig {
                mode: self.sparsify.mode,
                delta: self.sparsify.delta,
                gamma: self.sparsify.gamma,
                rate: self.sparsify.rate,
                step_size: self.codec.step_size_unidirectional,
            },
            step_size_unidirectional: self.codec.step_size_unidirectional,
            step_size_bidirectional: self.codec.step_size_bidirectional,
            step_size_other: self.codec.step_size_other,
            local: LocalTraining {
                batch_size: self.train.batch_size,
                weight_optimizer: optimizer(self.train.optimizer, self.train.momentum),
                weight_lr: self.train.lr,
                scaling_optimizer: optimizer(self.scaling.optimizer, self.scaling.momentum),
                scaling_schedule: self.scaling.schedule,
                scaling_lr_max: self.scaling.lr_max,
                scaling_lr_min: self.scaling.lr_min,
                flip: self.train.flip,
            },
            seed: self.seed,
        }
    }
}

//! TOML run configuration.
//!
//! Every field is optional except `config_version`; omitted fields take the
//! DT-Tiny / standard-recipe defaults, with `input_channels`, `num_classes`
//! and the augmentation policy following the chosen dataset.
//!
//! ```toml
//! config_version = 1
//!
//! [model]
//! stem_channels = 16
//! reduction = 8
//! recursion = 2
//!
//! [[model.stage]]
//! out_channels = 16
//! blocks = 3
//! stride = 1
//!
//! [train]
//! lr = 0.1
//! epochs = 100
//!
//! [data]
//! dataset = "cifar10"
//! ```

use std::path::{Path, PathBuf};

use deeptraverse_core::data::AugmentPolicy;
use deeptraverse_core::train::OptimConfig;
use deeptraverse_core::{ModelConfig, StageConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{read, AppError, Result};

pub const CONFIG_VERSION: u32 = 1;
pub const DEFAULT_SEED: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Mnist,
    Blobs,
}

impl DatasetKind {
    pub fn input_channels(self) -> usize {
        match self {
            DatasetKind::Mnist => 1,
            _ => 3,
        }
    }

    pub fn needs_dir(self) -> bool {
        self != DatasetKind::Blobs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AugmentKind {
    None,
    FlipCrop,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub out_channels: usize,
    pub blocks: usize,
    pub stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recursion: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stem_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduction: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recursion: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depthwise_kernel: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_excitation_width: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<Vec<StageSection>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    /// Also decay batchnorm parameters and biases.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay_all: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_batch_size: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Keep only the first n training images.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_subset: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crop_padding: Option<usize>,
    /// Standardise channels with statistics of the training split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalize: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blobs_train: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blobs_test: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blobs_classes: Option<usize>,
    /// Image height and width of the synthetic blobs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blobs_size: Option<usize>,
}

/// The file as written, before defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub config_version: u32,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
}

/// Everything a run needs, all defaults materialised.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    pub eval_batch_size: usize,
    pub data: DataConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    pub dir: Option<PathBuf>,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub augment: AugmentPolicy,
    pub normalize: bool,
    pub blobs_train: usize,
    pub blobs_test: usize,
    pub blobs_classes: usize,
    pub blobs_size: usize,
}

/// Command-line values, which win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub recursion: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub train_subset: Option<usize>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
        if file.config_version != CONFIG_VERSION {
            return Err(AppError::Config(format!(
                "config_version {} is not supported (expected {CONFIG_VERSION})",
                file.config_version
            )));
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        let text = String::from_utf8(bytes).map_err(|_| AppError::Config(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            AppError::Config(msg) => AppError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// An empty file: every value at its default.
    pub fn defaults() -> Self {
        ConfigFile { config_version: CONFIG_VERSION, ..Default::default() }
    }

    pub fn apply(&mut self, o: &Overrides) {
        let t = &mut self.train;
        t.seed = o.seed.or(t.seed);
        t.epochs = o.epochs.or(t.epochs);
        t.lr = o.lr.or(t.lr);
        t.batch_size = o.batch_size.or(t.batch_size);
        if let Some(r) = o.recursion {
            self.model.recursion = Some(r);
            for s in self.model.stage.iter_mut().flatten() {
                s.recursion = None;
            }
        }
        self.data.dir = o.data_dir.clone().or(self.data.dir.take());
        self.data.train_subset = o.train_subset.or(self.data.train_subset);
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let dataset = self.data.dataset.unwrap_or(DatasetKind::Cifar10);
        let blobs_classes = self.data.blobs_classes.unwrap_or(4);
        let dataset_classes = match dataset {
            DatasetKind::Cifar10 | DatasetKind::Mnist => 10,
            DatasetKind::Cifar100 => 100,
            DatasetKind::Blobs => blobs_classes,
        };
        let m = &self.model;
        let num_classes = m.num_classes.unwrap_or(dataset_classes);
        if num_classes != dataset_classes {
            return Err(AppError::Config(format!(
                "model.num_classes = {num_classes} but dataset {dataset:?} has {dataset_classes} classes"
            )));
        }
        let input_channels = m.input_channels.unwrap_or(dataset.input_channels());
        if input_channels != dataset.input_channels() {
            return Err(AppError::Config(format!(
                "model.input_channels = {input_channels} but dataset {dataset:?} images have {} channels",
                dataset.input_channels()
            )));
        }
        let base = ModelConfig::dt_tiny(input_channels, num_classes);
        let stages = match &m.stage {
            Some(list) => list
                .iter()
                .map(|s| StageConfig {
                    out_channels: s.out_channels,
                    num_blocks: s.blocks,
                    stride: s.stride,
                    recursion_override: s.recursion,
                })
                .collect(),
            None => base.stages.clone(),
        };
        let model = ModelConfig {
            input_channels,
            stem_channels: m.stem_channels.unwrap_or(base.stem_channels),
            stages,
            reduction: m.reduction.unwrap_or(base.reduction),
            recursion: m.recursion.unwrap_or(base.recursion),
            dropout_rate: m.dropout_rate.unwrap_or(base.dropout_rate),
            num_classes,
            depthwise_kernel: m.depthwise_kernel.unwrap_or(base.depthwise_kernel),
            min_excitation_width: m.min_excitation_width.unwrap_or(base.min_excitation_width),
        };
        model.validate().map_err(|e| AppError::Config(format!("[model] {e}")))?;

        let d = OptimConfig::default();
        let t = &self.train;
        let optim = OptimConfig {
            base_lr: t.lr.unwrap_or(d.base_lr),
            momentum: t.momentum.unwrap_or(d.momentum),
            weight_decay: t.weight_decay.unwrap_or(d.weight_decay),
            epochs: t.epochs.unwrap_or(d.epochs),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            decay_all: t.decay_all.unwrap_or(d.decay_all),
        };
        optim.validate().map_err(|e| AppError::Config(format!("[train] {e}")))?;
        let eval_batch_size = t.eval_batch_size.unwrap_or(256);
        if eval_batch_size == 0 {
            return Err(AppError::Config("[train] eval_batch_size must be positive".into()));
        }

        let default_augment =
            if matches!(dataset, DatasetKind::Cifar10 | DatasetKind::Cifar100) { AugmentKind::FlipCrop } else { AugmentKind::None };
        let augment = match self.data.augment.unwrap_or(default_augment) {
            AugmentKind::None => AugmentPolicy::None,
            AugmentKind::FlipCrop => AugmentPolicy::FlipCrop { pad: self.data.crop_padding.unwrap_or(4) },
        };
        let data = DataConfig {
            dataset,
            dir: self.data.dir.clone(),
            train_subset: self.data.train_subset,
            test_subset: self.data.test_subset,
            augment,
            normalize: self.data.normalize.unwrap_or(true),
            blobs_train: self.data.blobs_train.unwrap_or(1000),
            blobs_test: self.data.blobs_test.unwrap_or(200),
            blobs_classes,
            blobs_size: self.data.blobs_size.unwrap_or(8),
        };
        for (field, v) in [("train_subset", data.train_subset), ("test_subset", data.test_subset)] {
            if v == Some(0) {
                return Err(AppError::Config(format!("[data] {field} must be positive")));
            }
        }
        if dataset == DatasetKind::Blobs && (data.blobs_train == 0 || data.blobs_test == 0 || data.blobs_size == 0) {
            return Err(AppError::Config("[data] blobs_train, blobs_test and blobs_size must be positive".into()));
        }
        Ok(RunConfig { model, optim, seed: t.seed.unwrap_or(DEFAULT_SEED), eval_batch_size, data })
    }
}

impl RunConfig {
    /// The resolved configuration as a complete config file.
    pub fn to_file(&self) -> ConfigFile {
        let m = &self.model;
        let o = &self.optim;
        let d = &self.data;
        let (augment, crop_padding) = match d.augment {
            AugmentPolicy::None => (AugmentKind::None, None),
            AugmentPolicy::FlipCrop { pad } => (AugmentKind::FlipCrop, Some(pad)),
        };
        let blobs = d.dataset == DatasetKind::Blobs;
        ConfigFile {
            config_version: CONFIG_VERSION,
            model: ModelSection {
                input_channels: Some(m.input_channels),
                num_classes: Some(m.num_classes),
                stem_channels: Some(m.stem_channels),
                reduction: Some(m.reduction),
                recursion: Some(m.recursion),
                dropout_rate: Some(m.dropout_rate),
                depthwise_kernel: Some(m.depthwise_kernel),
                min_excitation_width: Some(m.min_excitation_width),
                stage: Some(
                    m.stages
                        .iter()
                        .map(|s| StageSection {
                            out_channels: s.out_channels,
                            blocks: s.num_blocks,
                            stride: s.stride,
                            recursion: s.recursion_override,
                        })
                        .collect(),
                ),
            },
            train: TrainSection {
                seed: Some(self.seed),
                lr: Some(o.base_lr),
                momentum: Some(o.momentum),
                weight_decay: Some(o.weight_decay),
                decay_all: Some(o.decay_all),
                epochs: Some(o.epochs),
                batch_size: Some(o.batch_size),
                eval_batch_size: Some(self.eval_batch_size),
            },
            data: DataSection {
                dataset: Some(d.dataset),
                dir: d.dir.clone(),
                train_subset: d.train_subset,
                test_subset: d.test_subset,
                augment: Some(augment),
                crop_padding,
                normalize: Some(d.normalize),
                blobs_train: blobs.then_some(d.blobs_train),
                blobs_test: blobs.then_some(d.blobs_test),
                blobs_classes: blobs.then_some(d.blobs_classes),
                blobs_size: blobs.then_some(d.blobs_size),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_file()).expect("config serialises")
    }

    /// SHA-256 of the resolved TOML, hex encoded.
    pub fn content_hash(&self) -> String {
        hex_digest(self.to_toml().as_bytes())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

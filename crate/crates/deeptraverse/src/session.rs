//! Data loading and the resumable training loop behind `train` and `eval`.

use std::path::{Path, PathBuf};

use deeptraverse_core::data::{synthetic_blobs, Dataset, Split};
use deeptraverse_core::train::{evaluate, train_epoch, EvalMetrics, OptimState};
use deeptraverse_core::{build_model, Model};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Metadata, MetricRow, Normalization, RngState};
use crate::config::{ConfigFile, DataConfig, DatasetKind, RunConfig};
use crate::datasets::{load_cifar10, load_cifar100, load_mnist};
use crate::error::{AppError, Result};

/// Seeds of the synthetic blob splits; fixed so every run sees the same data.
pub const BLOBS_TRAIN_SEED: u64 = 0xB10B_0001;
pub const BLOBS_TEST_SEED: u64 = 0xB10B_0002;

/// Stream of the training generator; stream 0 of the same seed builds the model.
const TRAIN_STREAM: u64 = 1;

pub struct Data {
    pub train: Dataset,
    pub test: Dataset,
    pub normalization: Option<Normalization>,
    /// Where the files came from; `None` for synthetic data.
    pub dir: Option<PathBuf>,
}

/// `--data`, then the config file, then `DT_DATA_DIR`.
pub fn resolve_data_dir(cfg: &DataConfig) -> Option<PathBuf> {
    cfg.dir.clone().or_else(|| std::env::var_os("DT_DATA_DIR").map(PathBuf::from))
}

fn load_split(cfg: &DataConfig, dir: &Path, split: Split) -> Result<Dataset> {
    match cfg.dataset {
        DatasetKind::Cifar10 => load_cifar10(dir, split),
        DatasetKind::Cifar100 => load_cifar100(dir, split),
        DatasetKind::Mnist => load_mnist(dir, split),
        DatasetKind::Blobs => unreachable!("synthetic data has no directory"),
    }
}

/// Loads both splits, applies subsets, and standardises both with
/// statistics of the (subset) training split. `normalization` reuses stored
/// statistics instead, as evaluation of a checkpoint must.
pub fn load_data(cfg: &DataConfig, normalization: Option<&Normalization>) -> Result<Data> {
    let (mut train, mut test, dir) = if cfg.dataset == DatasetKind::Blobs {
        let shape = [3, cfg.blobs_size, cfg.blobs_size];
        let train = synthetic_blobs(cfg.blobs_train, cfg.blobs_classes, shape, BLOBS_TRAIN_SEED)?;
        let mut test = synthetic_blobs(cfg.blobs_test, cfg.blobs_classes, shape, BLOBS_TEST_SEED)?;
        test.split = Split::Test;
        (train, test, None)
    } else {
        let dir = resolve_data_dir(cfg).ok_or_else(|| {
            AppError::Config(format!("{:?} needs a data directory: pass --data or set DT_DATA_DIR", cfg.dataset))
        })?;
        if !dir.is_dir() {
            return Err(AppError::io(
                &dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            ));
        }
        (load_split(cfg, &dir, Split::Train)?, load_split(cfg, &dir, Split::Test)?, Some(dir))
    };
    if let Some(n) = cfg.train_subset {
        train = train.take(n)?;
    }
    if let Some(n) = cfg.test_subset {
        test = test.take(n)?;
    }
    let normalization = match (normalization, cfg.normalize) {
        (Some(stored), _) => Some(stored.clone()),
        (None, true) => {
            let (mean, std) = train.channel_stats();
            Some(Normalization { mean, std })
        }
        (None, false) => None,
    };
    if let Some(n) = &normalization {
        train.normalize(&n.mean, &n.std)?;
        test.normalize(&n.mean, &n.std)?;
    }
    Ok(Data { train, test, normalization, dir })
}

/// A model with its optimizer, training stream and history.
pub struct Session {
    pub run: RunConfig,
    pub model: Model,
    pub optim: OptimState,
    pub rng: ChaCha8Rng,
    pub history: Vec<MetricRow>,
}

impl Session {
    pub fn new(run: RunConfig) -> Result<Self> {
        let model = build_model(&run.model, run.seed)?;
        let optim = OptimState::new(run.optim, &model.params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Session { run, model, optim, rng, history: Vec::new() })
    }

    /// Continues exactly where `ckpt` left off.
    pub fn resume(ckpt: &Checkpoint, path: &Path) -> Result<Self> {
        let run = ckpt.meta.config.resolve().map_err(|e| AppError::format(path, format!("stored config: {e}")))?;
        let mut s = Session::new(run)?;
        ckpt.restore(&mut s.model, Some(&mut s.optim), path)?;
        s.rng = ckpt.meta.rng.restore().map_err(|e| AppError::format(path, e))?;
        s.history = ckpt.meta.metric.clone();
        Ok(s)
    }

    pub fn epochs_done(&self) -> usize {
        self.optim.epoch
    }

    pub fn finished(&self) -> bool {
        self.optim.epoch >= self.run.optim.epochs
    }

    /// One training epoch followed by evaluation on the test split.
    pub fn epoch(&mut self, data: &Data) -> Result<MetricRow> {
        let stats = train_epoch(&mut self.model, &data.train, &mut self.optim, self.run.data.augment, &mut self.rng)?;
        let test = evaluate(&self.model, &data.test, self.run.eval_batch_size)?;
        let row = MetricRow {
            epoch: self.optim.epoch,
            lr: stats.lr,
            train_loss: stats.loss,
            train_acc: stats.accuracy,
            test_loss: test.loss,
            test_top1: test.top1,
            test_top5: test.top5,
        };
        self.history.push(row);
        Ok(row)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<EvalMetrics> {
        Ok(evaluate(&self.model, data, self.run.eval_batch_size)?)
    }

    pub fn checkpoint(&self, normalization: Option<&Normalization>) -> Checkpoint {
        let meta = Metadata {
            epoch: self.optim.epoch,
            step: self.optim.step,
            rng: RngState::capture(&self.rng),
            normalization: normalization.cloned(),
            config: self.run.to_file(),
            metric: self.history.clone(),
        };
        Checkpoint::capture(meta, &self.model, &self.optim)
    }
}

/// The model stored in a checkpoint, for evaluation.
pub fn model_from_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(RunConfig, Model)> {
    let run = ckpt.meta.config.resolve().map_err(|e| AppError::format(path, format!("stored config: {e}")))?;
    let mut model = build_model(&run.model, run.seed)?;
    ckpt.restore(&mut model, None, path)?;
    Ok((run, model))
}

/// Loads the run configuration from an optional file, for commands that accept `--config`.
pub fn load_config(path: Option<&Path>) -> Result<ConfigFile> {
    match path {
        Some(p) => ConfigFile::load(p),
        None => Ok(ConfigFile::defaults()),
    }
}

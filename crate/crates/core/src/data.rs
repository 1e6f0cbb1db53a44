//! In-memory datasets, normalisation, augmentation and synthetic data.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, input_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// N×C×H×W; values in [0, 1] until [`Dataset::normalize`] is applied.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    /// Per-channel statistics used by the normalisation, once applied.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    normalized: bool,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let [n, ..] = images.dims4()?;
        if n != labels.len() {
            return Err(config_err!("{n} images but {} labels", labels.len()));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(input_err!("label {l} at index {i} is outside [0, {num_classes})"));
        }
        Ok(Dataset { images, labels, num_classes, split, mean: Vec::new(), std: Vec::new(), normalized: false })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let [_, c, h, w] = self.images.dims4().expect("dataset images are rank 4");
        [c, h, w]
    }

    /// Per-channel mean and (population) standard deviation of the pixels.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let [n, c, h, w] = self.images.dims4().expect("dataset images are rank 4");
        let count = (n * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let m = (0..n).map(|i| self.images.plane(i, ch).iter().sum::<f64>()).sum::<f64>() / count;
            let v = (0..n)
                .map(|i| self.images.plane(i, ch).iter().map(|&x| (x - m) * (x - m)).sum::<f64>())
                .sum::<f64>()
                / count;
            mean[ch] = m;
            std[ch] = libm::sqrt(v);
        }
        (mean, std)
    }

    /// `x ← (x − mean_c) / std_c`; refuses to run twice.
    pub fn normalize(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        if self.normalized {
            return Err(config_err!("dataset is already normalised"));
        }
        let [_, c, h, w] = self.images.dims4()?;
        if mean.len() != c || std.len() != c {
            return Err(config_err!("normalisation needs {c} channel statistics"));
        }
        if let Some(ch) = std.iter().position(|&s| s.is_nan() || s <= 0.0) {
            return Err(config_err!("channel {ch} has non-positive standard deviation"));
        }
        for (i, plane) in self.images.data_mut().chunks_exact_mut(h * w).enumerate() {
            let ch = i % c;
            for v in plane {
                *v = (*v - mean[ch]) / std[ch];
            }
        }
        self.mean = mean.to_vec();
        self.std = std.to_vec();
        self.normalized = true;
        Ok(())
    }

    /// Normalises with this dataset's own statistics and returns them.
    pub fn normalize_self(&mut self) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mean, std) = self.channel_stats();
        self.normalize(&mean, &std)?;
        Ok((mean, std))
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.gather_rows(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx)?;
        Ok(Dataset { images, labels, ..self.clone_meta() })
    }

    fn clone_meta(&self) -> Self {
        Dataset {
            images: Tensor::zeros(&[1]),
            labels: Vec::new(),
            num_classes: self.num_classes,
            split: self.split,
            mean: self.mean.clone(),
            std: self.std.clone(),
            normalized: self.normalized,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentPolicy {
    None,
    /// Horizontal flip with probability 1/2, then a random crop from the image zero-padded by `pad`.
    FlipCrop { pad: usize },
}

impl AugmentPolicy {
    pub const STANDARD: AugmentPolicy = AugmentPolicy::FlipCrop { pad: 4 };
}

/// Mirrors a C×H×W image left to right.
pub fn flip_horizontal(img: &mut [f64], c: usize, h: usize, w: usize) {
    debug_assert_eq!(img.len(), c * h * w);
    for row in img.chunks_exact_mut(w) {
        row.reverse();
    }
}

/// The `h × w` window at offset (`dy`, `dx`) of the image zero-padded by `pad` on every side.
pub fn crop_padded(img: &[f64], c: usize, h: usize, w: usize, pad: usize, dy: usize, dx: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy as usize >= h {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx < 0 || sx as usize >= w {
                    continue;
                }
                out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
            }
        }
    }
    out
}

/// Applies `policy` to every image of an N×C×H×W batch. Draw order per
/// image: flip decision, vertical offset, horizontal offset.
pub fn augment(batch: &Tensor, rng: &mut dyn RngCore, policy: AugmentPolicy) -> Result<Tensor> {
    let AugmentPolicy::FlipCrop { pad } = policy else {
        return Ok(batch.clone());
    };
    let [_, c, h, w] = batch.dims4()?;
    let mut out = batch.clone();
    for img in out.data_mut().chunks_exact_mut(c * h * w) {
        if rng.gen_bool(0.5) {
            flip_horizontal(img, c, h, w);
        }
        let dy = rng.gen_range(0..=2 * pad);
        let dx = rng.gen_range(0..=2 * pad);
        let cropped = crop_padded(img, c, h, w, pad, dy, dx);
        img.copy_from_slice(&cropped);
    }
    Ok(out)
}

/// Noise level of [`synthetic_blobs`].
pub const BLOB_SIGMA: f64 = 0.08;

/// Mean of class `k` in channel `ch`: classes sit on a grid in [0.125, 0.875]
/// spaced `0.75/(classes−1)`, permuted differently per channel.
pub fn blob_mean(k: usize, ch: usize, classes: usize) -> f64 {
    let slot = (k + ch * (k + 1)) % classes;
    let slot = if ch == 0 { k } else { slot };
    0.125 + 0.75 * slot as f64 / (classes - 1).max(1) as f64
}

/// Class-conditional Gaussian images with per-pixel noise [`BLOB_SIGMA`],
/// clamped to [0, 1]. Channel 0 orders the classes by mean, so adjacent
/// classes are `0.75/(classes−1)` apart there, at least 3σ for up to 4 classes.
pub fn synthetic_blobs(n: usize, classes: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    if classes < 2 || n == 0 {
        return Err(config_err!("synthetic blobs need at least 2 classes and 1 sample"));
    }
    let [c, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, BLOB_SIGMA).expect("valid sigma");
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        for ch in 0..c {
            let m = blob_mean(k, ch, classes);
            for _ in 0..h * w {
                let v: f64 = m + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Dataset::new(Tensor::from_vec(&[n, c, h, w], data)?, labels, classes, Split::Train)
}

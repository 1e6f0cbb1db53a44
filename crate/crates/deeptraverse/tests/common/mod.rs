#![allow(dead_code)]

use std::path::Path;

use deeptraverse::datasets::{encode_idx_images, encode_idx_labels, mnist_files};
use deeptraverse_core::data::Split;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Writes a small learnable IDX dataset: class `k` lights up row band `k`
/// of a `side × side` image on a noisy background.
pub fn write_mnist(dir: &Path, train: usize, test: usize, side: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (split, n) in [(Split::Train, train), (Split::Test, test)] {
        let mut pixels = Vec::with_capacity(n * side * side);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let k = (i % 10) as u8;
            labels.push(k);
            for y in 0..side {
                for _ in 0..side {
                    let lit = y * 10 / side == k as usize;
                    let base: u8 = if lit { 200 } else { 20 };
                    pixels.push(base.saturating_add(rng.gen_range(0..40)));
                }
            }
        }
        let (img, lbl) = mnist_files(split);
        std::fs::write(dir.join(img), encode_idx_images(side, side, &pixels)).unwrap();
        std::fs::write(dir.join(lbl), encode_idx_labels(&labels)).unwrap();
    }
}

/// Two-block network small enough for quick command-line runs.
pub const SMALL_MODEL: &str = "[model]
stem_channels = 8
reduction = 4
[[model.stage]]
out_channels = 8
blocks = 1
stride = 1
[[model.stage]]
out_channels = 16
blocks = 1
stride = 2
";

pub fn mnist_config(dir: &Path, epochs: usize) -> String {
    format!(
        "config_version = 1\n{SMALL_MODEL}[train]\nseed = 5\nepochs = {epochs}\nbatch_size = 32\nlr = 0.05\n[data]\ndataset = \"mnist\"\ndir = {:?}\n",
        dir.display().to_string()
    )
}

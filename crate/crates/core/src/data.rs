//! Image classification datasets: CIFAR-10 binary batches and a seeded synthetic set.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

/// Samples `N x ...` (images are `N x C x H x W` in `[0, 1]`) with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() < 2 {
            return Err(Error::dim(format!("samples must be batched as N x ..., got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gathers the listed samples into a batch.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.images.len() / self.len().max(1);
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::dim(format!("sample {i} out of range for {} samples", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// The first `n` samples (all of them when `n >= len`).
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.gather(&idx)?;
        Dataset::new(images, labels, self.num_classes)
    }
}

/// Parses concatenated CIFAR-10 records (`label` byte then 3072 channel-major pixels).
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 data length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    if n == 0 {
        return Err(Error::Format("CIFAR-10 data is empty".into()));
    }
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format(format!("record {i} has label {} > 9", rec[0])));
        }
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], images)?, labels, 10)
}

fn read_batches(dir: &Path, files: &[&str]) -> Result<Dataset> {
    let mut bytes = Vec::new();
    for f in files {
        let path = dir.join(f);
        let chunk = fs::read(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if chunk.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: length {} is not a multiple of {CIFAR_RECORD}",
                path.display(),
                chunk.len()
            )));
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar10(&bytes)
}

/// Loads the five training batches and the test batch from a CIFAR-10 binary directory.
pub fn load_cifar10(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((read_batches(dir, &CIFAR_TRAIN_FILES)?, read_batches(dir, &[CIFAR_TEST_FILE])?))
}

pub const SYNTH_CLASSES: usize = 10;
pub const SYNTH_SIZE: usize = 16;
const SYNTH_NOISE: f64 = 0.15;

/// Foreground mask value in `[0, 1]` of class `label` at pixel `(y, x)`.
struct Pattern {
    label: usize,
    cx: f64,
    cy: f64,
    scale: f64,
    phase: f64,
}

impl Pattern {
    fn sample(label: usize, rng: &mut Rng) -> Self {
        let s = SYNTH_SIZE as f64;
        Self {
            label,
            cx: rng.uniform_range(0.3 * s, 0.7 * s),
            cy: rng.uniform_range(0.3 * s, 0.7 * s),
            scale: rng.uniform(),
            phase: rng.uniform_range(0.0, 8.0),
        }
    }

    fn stripes(v: f64, period: f64) -> f64 {
        if (v / period).rem_euclid(1.0) < 0.5 {
            1.0
        } else {
            0.0
        }
    }

    fn mask(&self, y: f64, x: f64) -> f64 {
        let period = 3.0 + 2.0 * self.scale;
        let (dx, dy) = (x - self.cx, y - self.cy);
        let r = (dx * dx + dy * dy).sqrt();
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        match self.label {
            0 => Self::stripes(y + self.phase, period),
            1 => Self::stripes(x + self.phase, period),
            2 => Self::stripes(x + y + self.phase, period * 1.4),
            3 => Self::stripes(x - y + self.phase, period * 1.4),
            4 => {
                let cell = 2.0 + 2.0 * self.scale;
                let a = ((x + self.phase) / cell).floor() as i64;
                let b = ((y + self.phase) / cell).floor() as i64;
                on((a + b).rem_euclid(2) == 0)
            }
            5 => on(r < 3.0 + 3.0 * self.scale),
            6 => {
                let rad = 4.0 + 2.0 * self.scale;
                on((r - rad).abs() < 1.0)
            }
            7 => on(dx.abs() < 1.2 || dy.abs() < 1.2),
            8 => {
                let half = 2.5 + 2.0 * self.scale;
                on(dx.abs() < half && dy.abs() < half)
            }
            _ => on((dx - dy).abs() < 1.5 || (dx + dy).abs() < 1.5),
        }
    }
}

/// Deterministic 10-class `3 x 16 x 16` dataset. Sample `i` has label `i % 10`;
/// each image draws a class-specific geometric pattern with random placement,
/// scale and colors, plus Gaussian pixel noise, clamped to `[0, 1]`.
pub fn gen_synthetic(seed: u64, n_per_class: usize) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::config("synthetic dataset needs at least one sample per class"));
    }
    let n = n_per_class * SYNTH_CLASSES;
    let px = SYNTH_SIZE * SYNTH_SIZE;
    let mut rng = Rng::new(seed);
    let mut images = Vec::with_capacity(n * 3 * px);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % SYNTH_CLASSES;
        let pattern = Pattern::sample(label, &mut rng);
        let bg: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(0.0, 0.5));
        let delta: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(0.3, 0.5));
        let mask: Vec<f64> = (0..px)
            .map(|p| pattern.mask((p / SYNTH_SIZE) as f64 + 0.5, (p % SYNTH_SIZE) as f64 + 0.5))
            .collect();
        for c in 0..3 {
            for &m in &mask {
                let v = bg[c] + m * delta[c] + SYNTH_NOISE * rng.normal();
                images.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        labels.push(label);
    }
    Dataset::new(
        Tensor::new(vec![n, 3, SYNTH_SIZE, SYNTH_SIZE], images)?,
        labels,
        SYNTH_CLASSES,
    )
}

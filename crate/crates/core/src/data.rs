//! Datasets: the CIFAR-10 binary record format, a synthetic Gaussian-blob
//! generator, per-channel normalization, augmentation and batching.
//!
//! Pixels are kept as raw bytes; batches are decoded on demand so the
//! pre-normalization path is always available for re-serialization.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, streams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CIFAR_SHAPE: [usize; 3] = [3, 32, 32];
pub const CIFAR_CLASSES: usize = 10;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel affine standardization applied to `[0, 1]`-scaled pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    /// Zero padding (in raw pixel space) before the random crop; 0 disables cropping.
    pub pad: usize,
    pub flip: bool,
}

impl Default for Augment {
    fn default() -> Self {
        Self { pad: 4, flip: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    pub split: Split,
    shape: [usize; 3],
    classes: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
    norm: Normalization,
    _scalar: std::marker::PhantomData<S>,
}

impl<S: Scalar> Dataset<S> {
    /// Build from raw channel-planar bytes (`len = N * C * H * W`).
    pub fn from_bytes(
        split: Split,
        shape: [usize; 3],
        classes: usize,
        pixels: Vec<u8>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 || pixels.len() != labels.len() * per {
            return Err(Error::Shape(format!(
                "{} pixel bytes for {} labels of shape {:?}",
                pixels.len(),
                labels.len(),
                shape
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Config(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Self {
            split,
            shape,
            classes,
            pixels,
            labels,
            norm: Normalization::identity(shape[0]),
            _scalar: std::marker::PhantomData,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn set_normalization(&mut self, norm: Normalization) -> Result<()> {
        if norm.mean.len() != self.shape[0] || norm.std.len() != self.shape[0] {
            return Err(Error::Shape(format!("normalization for {} channels", norm.mean.len())));
        }
        if norm.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Numerical("normalization std must be positive".into()));
        }
        self.norm = norm;
        Ok(())
    }

    /// Per-channel mean and (population) standard deviation of the
    /// `[0, 1]`-scaled pixels.
    pub fn channel_stats(&self) -> Normalization {
        let [c, h, w] = self.shape;
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for img in self.pixels.chunks(c * plane) {
            for ch in 0..c {
                for &p in &img[ch * plane..(ch + 1) * plane] {
                    let v = p as f64 / 255.0;
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let n = (self.len() * plane) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, &s)| {
                *m /= n;
                (s / n - *m * *m).max(0.0).sqrt().max(1e-8)
            })
            .collect();
        Normalization { mean, std }
    }

    /// Decoded, normalized images `[len, C, H, W]` for the given indices.
    /// With `augment`, every sample draws its crop offset and flip from a
    /// stream keyed by (`seed`, `epoch`, sample index).
    pub fn batch(&self, indices: &[usize], augment: Option<(&Augment, u64, usize)>) -> Result<(Tensor<S>, Vec<usize>)> {
        let [c, h, w] = self.shape;
        let per = c * h * w;
        let mut out = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        let scale: Vec<(f64, f64)> =
            (0..c).map(|ch| (1.0 / (255.0 * self.norm.std[ch]), self.norm.mean[ch] / self.norm.std[ch])).collect();
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!("sample index {i} out of range {}", self.len())));
            }
            let img = &self.pixels[i * per..(i + 1) * per];
            let (dy, dx, flip) = match augment {
                Some((aug, seed, epoch)) => {
                    let mut rng = stream_rng(seed, streams::AUGMENT, ((epoch as u64) << 32) | i as u64);
                    let dy = if aug.pad > 0 { rng.random_range(0..=2 * aug.pad) as isize - aug.pad as isize } else { 0 };
                    let dx = if aug.pad > 0 { rng.random_range(0..=2 * aug.pad) as isize - aug.pad as isize } else { 0 };
                    let flip = aug.flip && rng.random_bool(0.5);
                    (dy, dx, flip)
                }
                None => (0, 0, false),
            };
            for ch in 0..c {
                let (a, b) = scale[ch];
                for y in 0..h {
                    for x in 0..w {
                        let sx = if flip { w - 1 - x } else { x } as isize + dx;
                        let sy = y as isize + dy;
                        let raw = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            img[ch * h * w + sy as usize * w + sx as usize]
                        } else {
                            0
                        };
                        out.push(S::of(raw as f64 * a - b));
                    }
                }
            }
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), c, h, w], out)?, labels))
    }

    /// All samples, in order, without augmentation.
    pub fn images(&self) -> Result<Tensor<S>> {
        Ok(self.batch(&(0..self.len()).collect::<Vec<_>>(), None)?.0)
    }

    /// Serialize to the 1-label-byte + planar-pixels record format.
    pub fn to_record_bytes(&self) -> Result<Vec<u8>> {
        if self.classes > 256 {
            return Err(Error::Contract("labels do not fit in one byte".into()));
        }
        let per = self.shape.iter().product::<usize>();
        let mut out = Vec::with_capacity(self.len() * (per + 1));
        for (i, &l) in self.labels.iter().enumerate() {
            out.push(l as u8);
            out.extend_from_slice(&self.pixels[i * per..(i + 1) * per]);
        }
        Ok(out)
    }

    pub fn write_records(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_record_bytes()?).map_err(|e| Error::io(path, e))
    }
}

/// Parse concatenated records of `1 + C*H*W` bytes. Offsets in errors are
/// byte offsets into `bytes`.
pub fn parse_records(bytes: &[u8], shape: [usize; 3], classes: usize, file: &Path) -> Result<(Vec<u8>, Vec<usize>)> {
    let per = shape.iter().product::<usize>();
    let rec = per + 1;
    let whole = bytes.len() / rec;
    if bytes.len() % rec != 0 {
        return Err(Error::Format {
            file: file.display().to_string(),
            offset: (whole * rec) as u64,
            msg: format!("truncated record {whole}: {} of {rec} bytes", bytes.len() % rec),
        });
    }
    let mut pixels = Vec::with_capacity(whole * per);
    let mut labels = Vec::with_capacity(whole);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        if r[0] as usize >= classes {
            return Err(Error::Format {
                file: file.display().to_string(),
                offset: (i * rec) as u64,
                msg: format!("label {} in record {i} exceeds {}", r[0], classes - 1),
            });
        }
        labels.push(r[0] as usize);
        pixels.extend_from_slice(&r[1..]);
    }
    Ok((pixels, labels))
}

fn read_cifar_files<S: Scalar>(dir: &Path, files: &[&str], split: Split) -> Result<Dataset<S>> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in files {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (p, l) = parse_records(&bytes, CIFAR_SHAPE, CIFAR_CLASSES, &path)?;
        pixels.extend(p);
        labels.extend(l);
    }
    Dataset::from_bytes(split, CIFAR_SHAPE, CIFAR_CLASSES, pixels, labels)
}

/// Load the five training batches and the test batch from `dir`; both
/// splits are standardized with training-split statistics.
pub fn load_cifar10<S: Scalar>(dir: &Path) -> Result<(Dataset<S>, Dataset<S>)> {
    let mut train = read_cifar_files(dir, &CIFAR_TRAIN_FILES, Split::Train)?;
    let mut test = read_cifar_files(dir, &[CIFAR_TEST_FILE], Split::Test)?;
    let norm = train.channel_stats();
    train.set_normalization(norm.clone())?;
    test.set_normalization(norm)?;
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub shape: [usize; 3],
    /// Amplitude of the class prototype relative to the pixel noise.
    pub separability: f64,
    /// Standard deviation of per-pixel noise, in raw pixel units.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_blobs")]
    pub blobs_per_class: usize,
}

fn default_noise() -> f64 {
    40.0
}

fn default_blobs() -> usize {
    2
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            train_size: 512,
            test_size: 256,
            shape: [3, 8, 8],
            separability: 1.0,
            noise: default_noise(),
            blobs_per_class: default_blobs(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 256 {
            return Err(Error::Config(format!("synthetic classes must be in [2, 256], got {}", self.classes)));
        }
        if self.train_size < self.classes || self.test_size < self.classes {
            return Err(Error::Config("synthetic split sizes must be at least the class count".into()));
        }
        if self.shape.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("synthetic image shape {:?} has a zero dimension", self.shape)));
        }
        if !(self.separability >= 0.0 && self.noise >= 0.0) {
            return Err(Error::Config("separability and noise must be non-negative".into()));
        }
        if self.blobs_per_class == 0 {
            return Err(Error::Config("blobs_per_class must be positive".into()));
        }
        Ok(())
    }
}

/// Class prototypes in `[-1, 1]`: a sum of signed Gaussian blobs per class
/// with a random colour per blob.
fn prototypes(spec: &SyntheticSpec, seed: u64) -> Vec<Vec<f64>> {
    let [c, h, w] = spec.shape;
    let mut rng = stream_rng(seed, streams::DATA, 0);
    (0..spec.classes)
        .map(|_| {
            let mut p = vec![0.0; c * h * w];
            for _ in 0..spec.blobs_per_class {
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let r = rng.random_range(0.15..0.35) * h.max(w) as f64;
                let colour: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            p[(ch * h + y) * w + x] += colour[ch] * (-d2 / (2.0 * r * r)).exp();
                        }
                    }
                }
            }
            let m = p.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
            p.iter_mut().for_each(|v| *v /= m);
            p
        })
        .collect()
}

fn sample_split<S: Scalar>(spec: &SyntheticSpec, protos: &[Vec<f64>], seed: u64, size: usize, split: Split) -> Result<Dataset<S>> {
    let index = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut rng = stream_rng(seed, streams::DATA, index);
    let mut labels: Vec<usize> = (0..size).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).map_err(|e| Error::Config(e.to_string()))?;
    let amp = 80.0 * spec.separability;
    let mut pixels = Vec::with_capacity(size * protos[0].len());
    for &l in &labels {
        for &p in &protos[l] {
            let v = 127.5 + amp * p + if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            pixels.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Dataset::from_bytes(split, spec.shape, spec.classes, pixels, labels)
}

/// Deterministic class-conditional blob images; both splits share the class
/// prototypes and are standardized with training statistics.
pub fn synthetic_dataset<S: Scalar>(spec: &SyntheticSpec, seed: u64) -> Result<(Dataset<S>, Dataset<S>)> {
    spec.validate()?;
    let protos = prototypes(spec, seed);
    let mut train = sample_split(spec, &protos, seed, spec.train_size, Split::Train)?;
    let mut test = sample_split(spec, &protos, seed, spec.test_size, Split::Test)?;
    let norm = train.channel_stats();
    train.set_normalization(norm.clone())?;
    test.set_normalization(norm)?;
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Cifar10 { path: PathBuf },
    Synthetic(SyntheticSpec),
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Cifar10 { .. } => Ok(()),
            Self::Synthetic(s) => s.validate(),
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            Self::Cifar10 { .. } => CIFAR_SHAPE,
            Self::Synthetic(s) => s.shape,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Self::Cifar10 { .. } => CIFAR_CLASSES,
            Self::Synthetic(s) => s.classes,
        }
    }

    pub fn load<S: Scalar>(&self, seed: u64) -> Result<(Dataset<S>, Dataset<S>)> {
        match self {
            Self::Cifar10 { path } => load_cifar10(path),
            Self::Synthetic(s) => synthetic_dataset(s, seed),
        }
    }
}

/// Sample visiting order for `epoch`: a seeded permutation of `0..n`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, streams::SHUFFLE, epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Number of optimizer steps in one pass: `ceil(n / batch)`.
pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

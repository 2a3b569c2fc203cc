//! Datasets: IDX files and a seeded synthetic shapes task.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{MwqError, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images `[N, C, H, W]` with values in `[0, 1]` and one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(MwqError::InvalidShape {
                shape: images.shape().to_vec(),
                reason: "dataset images must be [N, C, H, W]".into(),
            });
        }
        if images.shape()[0] != labels.len() {
            return Err(MwqError::Data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(MwqError::Data("dataset is empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(MwqError::Data(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gathers the given sample indices into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.sample_shape();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::from_vec(&[indices.len(), c, h, w], data).expect("batch shape"),
            labels,
        )
    }

    /// Splits off the last `n` samples.
    pub fn split_tail(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(MwqError::Data(format!("cannot split {n} of {} samples", self.len())));
        }
        let head: Vec<usize> = (0..self.len() - n).collect();
        let tail: Vec<usize> = (self.len() - n..self.len()).collect();
        let (a, la) = self.batch(&head);
        let (b, lb) = self.batch(&tail);
        Ok((
            Dataset::new(a, la, self.classes)?,
            Dataset::new(b, lb, self.classes)?,
        ))
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| MwqError::format("idx", "truncated header"))
}

/// Parses an IDX image file (`u8` pixels) into `[N, 1, H, W]` scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(MwqError::format("idx", format!("image magic {magic:#010x}")));
    }
    let dims = [be_u32(bytes, 4)?, be_u32(bytes, 8)?, be_u32(bytes, 12)?].map(|d| d as usize);
    let numel = dims.iter().product::<usize>();
    let body = &bytes[16..];
    if body.len() != numel {
        return Err(MwqError::format(
            "idx",
            format!("expected {numel} pixels, found {}", body.len()),
        ));
    }
    Tensor::from_vec(
        &[dims[0], 1, dims[1], dims[2]],
        body.iter().map(|&b| b as f32 / 255.0).collect(),
    )
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(MwqError::format("idx", format!("label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(MwqError::format("idx", format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Encodes `[N, 1, H, W]` images in `[0, 1]` as an IDX image file.
pub fn encode_idx_images(images: &Tensor) -> Result<Vec<u8>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(MwqError::InvalidShape {
            shape: s.to_vec(),
            reason: "IDX images must be [N, 1, H, W]".into(),
        });
    }
    let mut out = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [s[0], s[2], s[3]] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(images.data().iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| MwqError::Data(format!("label {l} exceeds 255")))?);
    }
    Ok(out)
}

/// MNIST-style file names inside a data directory.
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Loads `(train, test)` from a directory of IDX files.
pub fn load_idx_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let load = |images: &str, labels: &str| -> Result<(Tensor, Vec<usize>)> {
        Ok((
            parse_idx_images(&fs::read(dir.join(images))?)?,
            parse_idx_labels(&fs::read(dir.join(labels))?)?,
        ))
    };
    let (xa, ya) = load(TRAIN_IMAGES, TRAIN_LABELS)?;
    let (xb, yb) = load(TEST_IMAGES, TEST_LABELS)?;
    let classes = ya.iter().chain(&yb).max().map_or(1, |m| m + 1);
    Ok((Dataset::new(xa, ya, classes)?, Dataset::new(xb, yb, classes)?))
}

/// Writes a dataset pair in the layout read by [`load_idx_dir`].
pub fn save_idx_dir(dir: impl AsRef<Path>, train: &Dataset, test: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(TRAIN_IMAGES), encode_idx_images(train.images())?)?;
    fs::write(dir.join(TRAIN_LABELS), encode_idx_labels(train.labels())?)?;
    fs::write(dir.join(TEST_IMAGES), encode_idx_images(test.images())?)?;
    fs::write(dir.join(TEST_LABELS), encode_idx_labels(test.labels())?)?;
    Ok(())
}

pub const SHAPE_CLASSES: usize = 3;
pub const SHAPE_SIZE: usize = 16;
const NOISE_STD: f32 = 0.08;

/// Renders `n` single-channel 16x16 images: rectangle outlines (0), crosses (1), rings (2).
///
/// Classes cycle so every class is equally represented; the order is then shuffled.
pub fn synthetic_shapes(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(MwqError::Data("dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, NOISE_STD).expect("valid std");
    let mut labels: Vec<usize> = (0..n).map(|i| i % SHAPE_CLASSES).collect();
    labels.shuffle(&mut rng);
    let px = SHAPE_SIZE * SHAPE_SIZE;
    let mut data = Vec::with_capacity(n * px);
    for &label in &labels {
        let mut img = [0.0f32; SHAPE_SIZE * SHAPE_SIZE];
        let intensity = rng.gen_range(0.6f32..=1.0);
        let extent: i32 = rng.gen_range(3..=6);
        let lo = extent;
        let hi = SHAPE_SIZE as i32 - 1 - extent;
        let (cx, cy) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
        match label {
            0 => {
                let other: i32 = rng.gen_range(3..=extent);
                let (a, b) = if rng.gen_bool(0.5) { (extent, other) } else { (other, extent) };
                for dy in -b..=b {
                    for dx in -a..=a {
                        if dx.abs() == a || dy.abs() == b {
                            img[((cy + dy) as usize) * SHAPE_SIZE + (cx + dx) as usize] = intensity;
                        }
                    }
                }
            }
            1 => {
                let t: i32 = rng.gen_range(0..=1);
                for dy in -extent..=extent {
                    for dx in -extent..=extent {
                        if dx.abs() <= t || dy.abs() <= t {
                            img[((cy + dy) as usize) * SHAPE_SIZE + (cx + dx) as usize] = intensity;
                        }
                    }
                }
            }
            _ => {
                let r = extent as f32 - rng.gen_range(0.0f32..0.5);
                for dy in -extent..=extent {
                    for dx in -extent..=extent {
                        let d = ((dx * dx + dy * dy) as f32).sqrt();
                        if (d - r).abs() < 0.6 {
                            img[((cy + dy) as usize) * SHAPE_SIZE + (cx + dx) as usize] = intensity;
                        }
                    }
                }
            }
        }
        data.extend(img.iter().map(|&v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0)));
    }
    Dataset::new(
        Tensor::from_vec(&[n, 1, SHAPE_SIZE, SHAPE_SIZE], data)?,
        labels,
        SHAPE_CLASSES,
    )
}

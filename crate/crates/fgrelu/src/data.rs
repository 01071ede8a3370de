//! Dataset ingestion (MNIST IDX, CIFAR-10 binary batches), noise and
//! contrast transforms, and deterministic synthetic fixtures for tests.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::gaussian_tensor;
use crate::tensor::Tensor;
use crate::Real;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images scaled to `[0,1]` plus integer labels.
///
/// `images` is `[N, d]` for flat data or `[N, C, H, W]` for image tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample shape without the leading batch dimension.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// One sample's pixel slice.
    pub fn sample(&self, i: usize) -> &[Real] {
        let sz: usize = self.sample_shape().iter().product();
        &self.images.data()[i * sz..(i + 1) * sz]
    }

    /// Batch of samples gathered by index, shaped `[indices.len(), ...]`.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let sz: usize = self.sample_shape().iter().product();
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        let mut out = Tensor::zeros(&shape);
        for (row, &i) in indices.iter().enumerate() {
            out.data_mut()[row * sz..(row + 1) * sz].copy_from_slice(self.sample(i));
        }
        out
    }

    /// Deterministic desk-scale subsample: the first `n` instances.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let indices: Vec<usize> = (0..n).collect();
        Dataset {
            images: self.gather(&indices),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }
}

/// Zero-mean Gaussian noise description.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: Real,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: Real, seed: u64) -> Result<Self> {
        if sigma < 0.0 {
            return Err(Error::Parameter(format!("noise sigma must be ≥ 0, got {sigma}")));
        }
        Ok(NoiseSpec { sigma, seed })
    }
}

/// Seeded i.i.d. `N(0, sigma²)` tensor.
pub fn gaussian_noise(shape: &[usize], spec: &NoiseSpec) -> Result<Tensor> {
    if spec.sigma < 0.0 {
        return Err(Error::Parameter(format!("noise sigma must be ≥ 0, got {}", spec.sigma)));
    }
    if spec.sigma == 0.0 {
        return Ok(Tensor::zeros(shape));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok(gaussian_tensor(shape, spec.sigma, &mut rng))
}

/// Multiply every pixel by a contrast factor `c ∈ [0,1]`.
pub fn reduce_contrast(images: &Tensor, c: Real) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&c) {
        return Err(Error::Parameter(format!("contrast factor must lie in [0, 1], got {c}")));
    }
    Ok(images.scale(c))
}

// ---- IDX (MNIST) ----

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Format {
            offset: offset as u64,
            message: "file truncated while reading a 32-bit header field".into(),
        })
}

/// Parse IDX image bytes (`magic 0x00000803`) into a flat `[N, rows*cols]`
/// tensor scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected) as u64,
            message: format!("image payload is {} bytes, expected {expected}", bytes.len()),
        });
    }
    let data: Vec<Real> = bytes[16..].iter().map(|&b| b as Real / 255.0).collect();
    Tensor::new(vec![n, rows * cols], data)
}

/// Parse IDX label bytes (`magic 0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected) as u64,
            message: format!("label payload is {} bytes, expected {expected}", bytes.len()),
        });
    }
    Ok(bytes[8..].to_vec())
}

fn load_idx_pair(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let images = parse_idx_images(&fs::read(images_path)?)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::Format {
            offset: 4,
            message: format!(
                "{} images but {} labels ({} / {})",
                images.shape()[0],
                labels.len(),
                images_path.display(),
                labels_path.display()
            ),
        });
    }
    Ok(Dataset { images, labels, split })
}

/// Load the four standard MNIST IDX files from a directory.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_idx_pair(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        Split::Train,
    )?;
    let test = load_idx_pair(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        Split::Test,
    )?;
    Ok((train, test))
}

/// Encode a flat dataset back to IDX bytes (images file). Pixels are
/// rescaled by 255; exact for data that came from an IDX file.
pub fn encode_idx_images(dataset: &Dataset, rows: usize, cols: usize) -> Result<Vec<u8>> {
    if dataset.sample_shape() != [rows * cols] {
        return Err(Error::dim(format!(
            "dataset samples {:?} do not match {rows}×{cols}",
            dataset.sample_shape()
        )));
    }
    let mut out = Vec::with_capacity(16 + dataset.images.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend(dataset.images.data().iter().map(|&v| (v * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_idx_labels(dataset: &Dataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + dataset.labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(dataset.labels.len() as u32).to_be_bytes());
    out.extend_from_slice(&dataset.labels);
    out
}

// ---- CIFAR-10 binary ----

/// Parse one CIFAR-10 binary batch: 3073-byte records of a label byte plus
/// 3×1024 channel-planar pixels. Returns `[N,3,32,32]` images.
pub fn parse_cifar_batch(bytes: &[u8]) -> Result<(Tensor, Vec<u8>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format {
            offset: (bytes.len() - bytes.len() % CIFAR_RECORD) as u64,
            message: format!(
                "file length {} is not a multiple of the {CIFAR_RECORD}-byte record size",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for rec in bytes.chunks(CIFAR_RECORD) {
        labels.push(rec[0]);
        data.extend(rec[1..].iter().map(|&b| b as Real / 255.0));
    }
    Ok((Tensor::new(vec![n, 3, 32, 32], data)?, labels))
}

pub fn encode_cifar_batch(dataset: &Dataset) -> Result<Vec<u8>> {
    if dataset.sample_shape() != [3, 32, 32] {
        return Err(Error::dim(format!(
            "dataset samples {:?} are not CIFAR-shaped [3, 32, 32]",
            dataset.sample_shape()
        )));
    }
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for i in 0..dataset.len() {
        out.push(dataset.labels[i]);
        out.extend(dataset.sample(i).iter().map(|&v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

/// Load the five CIFAR-10 training batches plus the test batch.
pub fn load_cifar10(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let mut images: Option<Tensor> = None;
    let mut labels = Vec::new();
    for i in 1..=5 {
        let (imgs, lbls) = parse_cifar_batch(&fs::read(dir.join(format!("data_batch_{i}.bin")))?)?;
        labels.extend(lbls);
        images = Some(match images {
            None => imgs,
            Some(acc) => concat_rows(&acc, &imgs)?,
        });
    }
    let train = Dataset { images: images.expect("five batches"), labels, split: Split::Train };
    let (test_images, test_labels) = parse_cifar_batch(&fs::read(dir.join("test_batch.bin"))?)?;
    let test = Dataset { images: test_images, labels: test_labels, split: Split::Test };
    Ok((train, test))
}

fn concat_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape()[1..] != b.shape()[1..] {
        return Err(Error::dim(format!(
            "cannot concatenate {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut shape = a.shape().to_vec();
    shape[0] += b.shape()[0];
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(shape, data)
}

// ---- synthetic fixtures ----

/// Deterministic pseudo-image dataset: ten smooth prototype patterns (a few
/// Gaussian bumps each) with per-sample brightness jitter, an extra random
/// bump, and light pixel noise, clipped to `[0,1]`. Labels are the prototype
/// indices. Structured enough that a narrow-bottleneck autoencoder has
/// something to learn, with everything derived from the seed.
pub fn synthetic_fixture(n: usize, dim: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || dim == 0 {
        return Err(Error::Parameter("fixture needs n ≥ 1 and dim ≥ 1".into()));
    }
    let side = (dim as f64).sqrt().ceil() as usize;
    let flat = synthetic_grid(n, side, side, seed)?;
    // Truncate each row to exactly `dim` values when dim isn't a square.
    let mut data = Vec::with_capacity(n * dim);
    for i in 0..n {
        data.extend_from_slice(&flat.images.data()[i * side * side..i * side * side + dim]);
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, dim], data)?,
        labels: flat.labels,
        split: Split::Train,
    })
}

/// Image-shaped fixture `[n, channels, height, width]` built the same way.
pub fn synthetic_fixture_shaped(
    n: usize,
    channels: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Dataset> {
    let base = synthetic_grid(n * channels, height, width, seed)?;
    let labels: Vec<u8> = base.labels.chunks(channels).map(|c| c[0]).collect();
    Ok(Dataset {
        images: base.images.reshape(&[n, channels, height, width])?,
        labels,
        split: Split::Train,
    })
}

fn synthetic_grid(n: usize, h: usize, w: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = 10usize;
    let bumps_per_class = 6;

    // Prototype bump parameters: (cy, cx, sigma, amplitude). Small sigmas
    // keep the background dark, like handwritten strokes on black.
    let mut protos = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut bumps = Vec::with_capacity(bumps_per_class);
        for _ in 0..bumps_per_class {
            let cy = (0.15 + 0.7 * rng.random::<f64>()) * h as f64;
            let cx = (0.15 + 0.7 * rng.random::<f64>()) * w as f64;
            let s = 1.0 + rng.random::<f64>() * (h.max(w) as f64 / 14.0);
            let a = 0.8 + rng.random::<f64>() * 0.4;
            bumps.push((cy, cx, s, a));
        }
        protos.push(bumps);
    }
    let render = |bumps: &[(f64, f64, f64, f64)], buf: &mut [Real], scale: f64| {
        for (i, v) in buf.iter_mut().enumerate() {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let mut acc = 0.0;
            for &(cy, cx, s, a) in bumps {
                let d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                acc += a * (-d2 / (2.0 * s * s)).exp();
            }
            *v += (acc * scale) as Real;
        }
    };

    let jitter = h.max(w) as f64 / 28.0;
    let mut data = vec![0.0 as Real; n * h * w];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (rng.random::<u32>() % classes as u32) as u8;
        labels.push(label);
        let brightness = 0.7 + rng.random::<f64>() * 0.3;
        // Within-class variation: jitter every bump's position and strength.
        let bumps: Vec<(f64, f64, f64, f64)> = protos[label as usize]
            .iter()
            .map(|&(cy, cx, s, a)| {
                (
                    cy + (rng.random::<f64>() - 0.5) * 2.0 * jitter,
                    cx + (rng.random::<f64>() - 0.5) * 2.0 * jitter,
                    s * (0.9 + rng.random::<f64>() * 0.2),
                    a * (0.85 + rng.random::<f64>() * 0.3),
                )
            })
            .collect();
        let row = &mut data[i * h * w..(i + 1) * h * w];
        render(&bumps, row, brightness);
        // One small sample-specific bump.
        let extra = [(
            rng.random::<f64>() * h as f64,
            rng.random::<f64>() * w as f64,
            1.0 + rng.random::<f64>(),
            0.4,
        )];
        render(&extra, row, 1.0);
        // Near-binary strokes on a dark background, the regime the
        // handwritten-digit experiments run in. The steep squash keeps
        // pixel values close to {0, 1} while edges stay smooth functions
        // of the stroke parameters.
        for v in row.iter_mut() {
            *v = 1.0 / (1.0 + (-20.0 * (*v - 0.35)).exp());
        }
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, h * w], data)?,
        labels,
        split: Split::Train,
    })
}

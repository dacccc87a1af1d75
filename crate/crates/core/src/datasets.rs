//! Image datasets in `[0, 1]`: MNIST IDX and CIFAR-10 binary parsers,
//! seeded synthetic generators, crop/flip augmentation and stratified
//! subsetting.

use std::io::Read;
use std::path::Path;

use aetlab_autodiff::Tensor;
use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DataError {
    #[error("bad IDX magic {0:#010x}")]
    BadMagic(u32),
    #[error("IDX header truncated: need {needed} bytes, have {got}")]
    TruncatedHeader { needed: usize, got: usize },
    #[error("payload truncated: dimensions need {expected} bytes, have {got}")]
    Truncated { expected: usize, got: usize },
    #[error("payload has {extra} bytes beyond the declared dimensions")]
    TrailingBytes { extra: usize },
    #[error("unsupported IDX layout: {0}")]
    Layout(String),
    #[error("CIFAR-10 binary length {0} is not a multiple of 3073")]
    CifarLength(usize),
    #[error("record {record}: label {label} out of range")]
    LabelRange { record: usize, label: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("pixel {index} = {value} outside [0, 1]")]
    PixelRange { index: usize, value: f64 },
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Images stored as one flat row-major `[n, c, h, w]` buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    shape: [usize; 3],
    labels: Vec<usize>,
    num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Vec<f64>, shape: [usize; 3], labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self, DataError> {
        let per = shape.iter().product::<usize>();
        if per == 0 || images.len() != per * labels.len() {
            return Err(DataError::CountMismatch {
                images: if per == 0 { 0 } else { images.len() / per },
                labels: labels.len(),
            });
        }
        if let Some((index, &value)) = images.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(DataError::PixelRange { index, value });
        }
        if let Some((record, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::LabelRange { record, label });
        }
        Ok(Dataset {
            images,
            shape,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[channels, height, width]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the selected images into a `[b, c, h, w]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.shape;
        Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape")
    }

    pub fn batch_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn all(&self) -> (Tensor, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        (self.batch(&idx), self.labels.clone())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            shape: self.shape,
            labels: self.batch_labels(indices),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    /// Indices of the first `per_class` examples of each class after a
    /// seeded shuffle, in shuffled order.
    pub fn stratified_indices(&self, per_class: usize, seed: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut taken = vec![0usize; self.num_classes];
        order
            .into_iter()
            .filter(|&i| {
                let c = self.labels[i];
                let keep = taken[c] < per_class;
                taken[c] += keep as usize;
                keep
            })
            .collect()
    }

    pub fn stratified_subset(&self, per_class: usize, seed: u64) -> Dataset {
        self.subset(&self.stratified_indices(per_class, seed))
    }

    /// Disjoint stratified split: `train_per_class` examples of each class
    /// go to the first set and the next `test_per_class` to the second.
    pub fn stratified_split(&self, train_per_class: usize, test_per_class: usize, seed: u64) -> (Dataset, Dataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut seen = vec![0usize; self.num_classes];
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for i in order {
            let c = self.labels[i];
            if seen[c] < train_per_class {
                train.push(i);
            } else if seen[c] < train_per_class + test_per_class {
                test.push(i);
            }
            seen[c] += 1;
        }
        let mut test_set = self.subset(&test);
        test_set.split = Split::Test;
        (self.subset(&train), test_set)
    }
}

/// Decoded IDX container.
#[derive(Clone, Debug, PartialEq)]
pub enum Idx {
    /// `count` images of `rows x cols`, scaled to `[0, 1]`.
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<f64>,
    },
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

pub fn parse_idx(bytes: &[u8]) -> Result<Idx, DataError> {
    if bytes.len() < 4 {
        return Err(DataError::TruncatedHeader {
            needed: 4,
            got: bytes.len(),
        });
    }
    let magic = be_u32(bytes, 0);
    let ndim = match magic {
        0x0000_0801 => 1,
        0x0000_0803 => 3,
        _ => return Err(DataError::BadMagic(magic)),
    };
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(DataError::TruncatedHeader {
            needed: header,
            got: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndim).map(|d| be_u32(bytes, 4 + 4 * d) as usize).collect();
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| DataError::Layout(format!("dimensions {dims:?} overflow")))?;
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(DataError::Truncated {
            expected,
            got: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(DataError::TrailingBytes {
            extra: payload.len() - expected,
        });
    }
    Ok(match ndim {
        1 => Idx::Labels(payload.to_vec()),
        _ => Idx::Images {
            count: dims[0],
            rows: dims[1],
            cols: dims[2],
            pixels: payload.iter().map(|&b| b as f64 / 255.0).collect(),
        },
    })
}

pub fn write_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    for d in [count, rows, cols] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Reads a file, transparently inflating gzip content.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = std::fs::read(path).map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| DataError::Io(format!("{}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Combines an IDX image file and an IDX label file into a 10-class dataset.
pub fn mnist_from_idx(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset, DataError> {
    let Idx::Images { count, rows, cols, pixels } = parse_idx(images)? else {
        return Err(DataError::Layout("expected an image file".into()));
    };
    let Idx::Labels(labels) = parse_idx(labels)? else {
        return Err(DataError::Layout("expected a label file".into()));
    };
    if count != labels.len() {
        return Err(DataError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    Dataset::new(pixels, [1, rows, cols], labels.iter().map(|&l| l as usize).collect(), 10, split)
}

pub fn load_mnist(images: &Path, labels: &Path, split: Split) -> Result<Dataset, DataError> {
    mnist_from_idx(&read_maybe_gz(images)?, &read_maybe_gz(labels)?, split)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

pub fn parse_cifar10_bin(bytes: &[u8], split: Split) -> Result<Dataset, DataError> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DataError::CifarLength(bytes.len()));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (record, chunk) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = chunk[0] as usize;
        if label >= 10 {
            return Err(DataError::LabelRange { record, label });
        }
        labels.push(label);
        images.extend(chunk[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Dataset::new(images, [3, 32, 32], labels, 10, split)
}

pub fn write_cifar10_bin(labels: &[u8], pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD);
    for (i, &label) in labels.iter().enumerate() {
        out.push(label);
        out.extend_from_slice(&pixels[i * (CIFAR_RECORD - 1)..(i + 1) * (CIFAR_RECORD - 1)]);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    TwoGaussians,
    TwoMoons,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n_per_class: usize,
    pub dim: usize,
    /// Distance between the two class means (two-gaussians) or a scale on
    /// the moon radius (two-moons), in raw units before the map to `[0, 1]`.
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(), DataError> {
        if self.n_per_class == 0 {
            return Err(DataError::Spec("n_per_class must be >= 1".into()));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(DataError::Spec("noise must be finite and >= 0".into()));
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return Err(DataError::Spec("separation must be positive".into()));
        }
        let min_dim = match self.kind {
            SyntheticKind::TwoGaussians => 1,
            SyntheticKind::TwoMoons => 2,
        };
        if self.dim < min_dim {
            return Err(DataError::Spec(format!("dim must be >= {min_dim}")));
        }
        Ok(())
    }

    /// Class means in the `[0, 1]` output space (two-gaussians only).
    pub fn class_means(&self) -> [Vec<f64>; 2] {
        let scale = self.output_scale();
        let mut lo = vec![0.5; self.dim];
        let mut hi = vec![0.5; self.dim];
        lo[0] = 0.5 - scale * self.separation / 2.0;
        hi[0] = 0.5 + scale * self.separation / 2.0;
        [lo, hi]
    }

    /// Raw-to-output scale: the mean span plus four noise deviations on each
    /// side fits inside `[0, 1]`; rarer outliers are clipped.
    fn output_scale(&self) -> f64 {
        let span = match self.kind {
            SyntheticKind::TwoGaussians => self.separation,
            SyntheticKind::TwoMoons => 3.0 * self.separation,
        };
        1.0 / (span + 8.0 * self.noise)
    }
}

/// Seeded two-class dataset of shape `[dim, 1, 1]`, balanced, classes
/// interleaved (even indices class 0).
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = spec.output_scale();
    let n = 2 * spec.n_per_class;
    let mut images = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    let means = spec.class_means();
    for i in 0..n {
        let class = i % 2;
        labels.push(class);
        match spec.kind {
            SyntheticKind::TwoGaussians => {
                for m in &means[class] {
                    let e: f64 = rng.sample(StandardNormal);
                    images.push((m + scale * spec.noise * e).clamp(0.0, 1.0));
                }
            }
            SyntheticKind::TwoMoons => {
                let t: f64 = rng.random_range(0.0..std::f64::consts::PI);
                // Upper moon centred at 0, lower moon shifted by (1, -0.5), in
                // units of `separation`; x spans [-1, 2], y spans [-1, 1].
                let (x, y) = if class == 0 {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let raw = [x - 0.5, y * 0.75];
                for d in 0..spec.dim {
                    let base = if d < 2 { raw[d] * spec.separation } else { 0.0 };
                    let e: f64 = rng.sample(StandardNormal);
                    images.push((0.5 + scale * (base + spec.noise * e)).clamp(0.0, 1.0));
                }
            }
        }
    }
    Dataset::new(images, [spec.dim, 1, 1], labels, 2, Split::Train)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub pad: usize,
    pub crop: usize,
    pub horizontal_flip: bool,
}

impl AugmentConfig {
    pub fn cifar() -> Self {
        AugmentConfig {
            pad: 4,
            crop: 32,
            horizontal_flip: true,
        }
    }

    pub fn mnist() -> Self {
        AugmentConfig {
            pad: 2,
            crop: 28,
            horizontal_flip: false,
        }
    }
}

/// Zero-pads, crops a `crop x crop` window at `offset` (row, col) of the
/// padded image and optionally mirrors it left-right.
pub fn augment_at(
    image: &[f64],
    shape: [usize; 3],
    cfg: &AugmentConfig,
    offset: (usize, usize),
    flip: bool,
) -> Result<Vec<f64>, DataError> {
    let [c, h, w] = shape;
    let (ph, pw) = (h + 2 * cfg.pad, w + 2 * cfg.pad);
    if cfg.crop > ph || cfg.crop > pw {
        return Err(DataError::Spec(format!("crop {} larger than padded {ph}x{pw}", cfg.crop)));
    }
    if offset.0 + cfg.crop > ph || offset.1 + cfg.crop > pw {
        return Err(DataError::Spec(format!("crop offset {offset:?} out of range")));
    }
    let k = cfg.crop;
    let mut out = vec![0.0; c * k * k];
    for ch in 0..c {
        for r in 0..k {
            let src_r = (offset.0 + r) as isize - cfg.pad as isize;
            if src_r < 0 || src_r >= h as isize {
                continue;
            }
            for col in 0..k {
                let src_c = (offset.1 + col) as isize - cfg.pad as isize;
                if src_c < 0 || src_c >= w as isize {
                    continue;
                }
                let dst_c = if flip { k - 1 - col } else { col };
                out[(ch * k + r) * k + dst_c] = image[(ch * h + src_r as usize) * w + src_c as usize];
            }
        }
    }
    Ok(out)
}

/// Random crop offset and coin flip drawn from `rng`.
pub fn augment(image: &[f64], shape: [usize; 3], cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Vec<f64>, DataError> {
    let [_, h, w] = shape;
    let (ph, pw) = (h + 2 * cfg.pad, w + 2 * cfg.pad);
    if cfg.crop > ph || cfg.crop > pw {
        return Err(DataError::Spec(format!("crop {} larger than padded {ph}x{pw}", cfg.crop)));
    }
    let r = rng.random_range(0..=ph - cfg.crop);
    let c = rng.random_range(0..=pw - cfg.crop);
    let flip = cfg.horizontal_flip && rng.random::<bool>();
    augment_at(image, shape, cfg, (r, c), flip)
}

/// Augments every image of a `[b, c, h, w]` batch; the output spatial size
/// is `crop x crop`.
pub fn augment_batch(batch: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor, DataError> {
    let s = batch.shape();
    let shape = [s[1], s[2], s[3]];
    let per: usize = shape.iter().product();
    let mut data = Vec::with_capacity(s[0] * s[1] * cfg.crop * cfg.crop);
    for img in batch.data().chunks_exact(per) {
        data.extend(augment(img, shape, cfg, rng)?);
    }
    Ok(Tensor::new(vec![s[0], s[1], cfg.crop, cfg.crop], data).expect("augmented shape"))
}

//! Desk-scale datasets: a procedural shapes generator, the `RMDS` binary
//! dataset format and deterministic stratified splits.
//!
//! `RMDS` layout (little-endian): magic, u32 version, u32 N, u16 height,
//! u16 width, u16 channels, u16 n_classes, then N records of a u16 label
//! followed by `height·width·channels` u8 pixels in channel-major order.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Reader;
use crate::rng::rng_for;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"RMDS";
pub const DATASET_VERSION: u32 = 1;

/// Number of distinct shape types the generator can draw.
pub const SHAPE_TYPES: usize = 4;
/// Number of color bins; classes enumerate (shape, color) pairs.
pub const COLOR_BINS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Full,
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N·c·h·w` values in [0, 1].
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub split: SplitTag,
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        images: Vec<f64>,
        labels: Vec<usize>,
        dims: (usize, usize, usize),
        n_classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Dataset> {
        let (channels, height, width) = dims;
        let per = channels * height * width;
        if per == 0 || n_classes == 0 {
            return Err(Error::Validation(format!("empty image dims {dims:?} or zero classes")));
        }
        if images.len() != labels.len() * per {
            return Err(Error::Validation(format!(
                "{} pixel values for {} images of {per} pixels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Validation(format!("label {bad} out of range for {n_classes} classes")));
        }
        if let Some(bad) = images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Dataset {
            images,
            labels,
            channels,
            height,
            width,
            n_classes,
            split: SplitTag::Full,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let p = self.pixels_per_image();
        &self.images[i * p..(i + 1) * p]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Selected images as a `[b, c, h, w]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.pixels_per_image());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(data, &[indices.len(), self.channels, self.height, self.width])
    }

    /// Selected images flattened to `[b, c·h·w]`.
    pub fn flat_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let t = self.batch(indices)?;
        t.reshape(&[indices.len(), self.pixels_per_image()])
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn subset(&self, indices: &[usize], split: SplitTag) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.pixels_per_image());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: self.labels_of(indices),
            channels: self.channels,
            height: self.height,
            width: self.width,
            n_classes: self.n_classes,
            split,
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapesSpec {
    pub n_classes: usize,
    pub image_size: usize,
    /// 1 renders color bins as gray levels, 3 as RGB hues.
    pub channels: usize,
    pub samples_per_class: usize,
    /// Standard deviation of the additive Gaussian pixel noise.
    pub noise: f64,
    /// Maximum center offset as a fraction of the image size.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        ShapesSpec {
            n_classes: 4,
            image_size: 32,
            channels: 1,
            samples_per_class: 100,
            noise: 0.1,
            jitter: 0.15,
            seed: 0,
        }
    }
}

impl ShapesSpec {
    /// Very few, noisy examples of many classes: a teacher can only fit
    /// them by memorizing.
    pub fn memorization(seed: u64) -> ShapesSpec {
        ShapesSpec {
            n_classes: 10,
            image_size: 16,
            channels: 1,
            samples_per_class: 5,
            noise: 0.3,
            jitter: 0.2,
            seed,
        }
    }

    pub fn vocabulary() -> usize {
        SHAPE_TYPES * COLOR_BINS
    }
}

const GRAY_LEVELS: [f64; COLOR_BINS] = [1.0, 0.65, 0.35];
const RGB_HUES: [[f64; 3]; COLOR_BINS] = [[1.0, 0.2, 0.2], [0.2, 1.0, 0.2], [0.2, 0.3, 1.0]];

/// Whether the pixel offset `(dx, dy)` from the shape center lies inside a
/// shape of half-extent `r`.
fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx.abs() <= r && dy.abs() <= r,
        1 => {
            let arm = r / 3.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        2 => dx * dx + dy * dy <= r * r,
        // Upward-pointing filled triangle.
        _ => dy.abs() <= r && dx.abs() <= 0.5 * (dy + r),
    }
}

/// Renders class `c` as shape `c mod 4` in color bin `c div 4`, so with at
/// most four classes the label is the shape-type index.
pub fn generate_shapes(spec: &ShapesSpec) -> Result<Dataset> {
    if spec.image_size < 8 {
        return Err(Error::Parameter(format!("image size {} below 8", spec.image_size)));
    }
    if spec.n_classes == 0 || spec.n_classes > ShapesSpec::vocabulary() {
        return Err(Error::Parameter(format!(
            "{} classes requested, vocabulary has {}",
            spec.n_classes,
            ShapesSpec::vocabulary()
        )));
    }
    if spec.channels != 1 && spec.channels != 3 {
        return Err(Error::Parameter(format!("channels must be 1 or 3, got {}", spec.channels)));
    }
    if !(spec.noise >= 0.0) || !(0.0..0.5).contains(&spec.jitter) {
        return Err(Error::Parameter(format!(
            "noise {} must be non-negative and jitter {} in [0, 0.5)",
            spec.noise, spec.jitter
        )));
    }
    let mut rng = rng_for(spec.seed, "shapes");
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid noise");
    let size = spec.image_size;
    let s = size as f64;
    let plane = size * size;
    let n = spec.n_classes * spec.samples_per_class;
    let mut images = Vec::with_capacity(n * spec.channels * plane);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..spec.samples_per_class {
        for class in 0..spec.n_classes {
            let (shape, bin) = (class % SHAPE_TYPES, class / SHAPE_TYPES);
            let color: Vec<f64> = if spec.channels == 1 {
                vec![GRAY_LEVELS[bin]]
            } else {
                RGB_HUES[bin].to_vec()
            };
            let cx = s / 2.0 + rng.random_range(-spec.jitter..=spec.jitter) * s;
            let cy = s / 2.0 + rng.random_range(-spec.jitter..=spec.jitter) * s;
            let r = rng.random_range(0.18..=0.3) * s;
            let start = images.len();
            for &level in &color {
                for y in 0..size {
                    for x in 0..size {
                        let hit = inside(shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
                        images.push(if hit { level } else { 0.0 });
                    }
                }
            }
            if spec.noise > 0.0 {
                for v in &mut images[start..] {
                    *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            labels.push(class);
        }
    }
    Dataset::new(
        images,
        labels,
        (spec.channels, size, size),
        spec.n_classes,
        format!("shapes:{spec:?}"),
    )
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Pixels quantized to the 1/255 grid that `save_dataset` stores.
pub fn quantize_pixels(values: &[f64]) -> Vec<f64> {
    values.iter().map(|&v| f64::from(to_u8(v)) / 255.0).collect()
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let dim = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::Parameter(format!("{what} {v} does not fit the file format")))
    };
    let header = [
        dim(dataset.height, "height")?,
        dim(dataset.width, "width")?,
        dim(dataset.channels, "channels")?,
        dim(dataset.n_classes, "n_classes")?,
    ];
    let count = u32::try_from(dataset.len()).map_err(|_| Error::Parameter("too many images".into()))?;
    let mut buf = Vec::with_capacity(20 + dataset.len() * (2 + dataset.pixels_per_image()));
    buf.extend_from_slice(&DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    for h in header {
        buf.extend_from_slice(&h.to_le_bytes());
    }
    for i in 0..dataset.len() {
        buf.extend_from_slice(&(dataset.labels[i] as u16).to_le_bytes());
        buf.extend(dataset.image(i).iter().map(|&v| to_u8(v)));
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let n = r.u32()? as usize;
    let height = r.u16()? as usize;
    let width = r.u16()? as usize;
    let channels = r.u16()? as usize;
    let n_classes = r.u16()? as usize;
    let per = height * width * channels;
    let mut images = Vec::with_capacity(n.min(1 << 16) * per);
    let mut labels = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        let label = r.u16()? as usize;
        if label >= n_classes {
            return Err(Error::Validation(format!(
                "record {i}: label {label} out of range for {n_classes} classes"
            )));
        }
        labels.push(label);
        images.extend(r.take(per)?.iter().map(|&b| f64::from(b) / 255.0));
    }
    if r.pos != bytes.len() {
        return Err(Error::Validation(format!(
            "{} trailing bytes after last record",
            bytes.len() - r.pos
        )));
    }
    Dataset::new(
        images,
        labels,
        (channels, height, width),
        n_classes,
        path.display().to_string(),
    )
}

/// Stratified split: each class is shuffled with the seeded stream and its
/// first `round(train_fraction · count)` examples (clamped so both sides keep
/// at least one) go to train. Indices keep dataset order inside each split.
pub fn split(dataset: &Dataset, train_fraction: f64, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if (train_fraction + test_fraction - 1.0).abs() > 1e-9 || !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::Parameter(format!(
            "split fractions {train_fraction} + {test_fraction} must be in [0, 1] and sum to 1"
        )));
    }
    let (train, test) = split_indices(dataset, train_fraction, seed)?;
    Ok((dataset.subset(&train, SplitTag::Train), dataset.subset(&test, SplitTag::Test)))
}

pub fn split_indices(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class = vec![Vec::new(); dataset.n_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = rng_for(seed, "split");
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Stratification(format!(
                "class {class} has {} example, at least 2 are needed",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let k = ((train_fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

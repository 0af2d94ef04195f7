//! Datasets: the MNIST IDX loader, seeded synthetic generators, and
//! deterministic mini-batching.

use std::path::Path;

use ndarray::{Axis, Slice};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{AceError, IdxError, Result};
use crate::numerics::{check_simplex, Matrix, ProbVector, SeededRng, Vector};

pub const IDX_IMAGE_MAGIC: u32 = 2051;
pub const IDX_LABEL_MAGIC: u32 = 2049;
pub const MNIST_CLASSES: usize = 10;

/// Input width of [`synth_regression`].
pub const REGRESSION_DIM: usize = 4;
/// Coefficients `w` of the target `y = sin(w · x)` used by [`synth_regression`].
pub const REGRESSION_WEIGHTS: [f64; REGRESSION_DIM] = [3.0, -2.0, 1.0, 0.5];

/// Per-sample targets: probability rows for classification, scalars for
/// regression.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Matrix),
    Values(Vector),
}

impl Targets {
    fn len(&self) -> usize {
        match self {
            Targets::Classes(m) => m.nrows(),
            Targets::Values(v) => v.len(),
        }
    }

    fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Classes(m) => Targets::Classes(m.select(Axis(0), rows)),
            Targets::Values(v) => Targets::Values(v.select(Axis(0), rows)),
        }
    }

    fn slice(&self, start: usize, end: usize) -> Targets {
        match self {
            Targets::Classes(m) => {
                Targets::Classes(m.slice_axis(Axis(0), Slice::from(start..end)).to_owned())
            }
            Targets::Values(v) => {
                Targets::Values(v.slice_axis(Axis(0), Slice::from(start..end)).to_owned())
            }
        }
    }
}

/// Feature rows with their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    targets: Targets,
}

impl Dataset {
    /// Every label row must be a valid probability vector.
    pub fn classification(features: Matrix, labels: Matrix) -> Result<Self> {
        for (i, row) in labels.rows().into_iter().enumerate() {
            check_simplex(row)
                .map_err(|e| AceError::InvalidInput(format!("label row {i}: {e}")))?;
        }
        Self::build(features, Targets::Classes(labels))
    }

    pub fn regression(features: Matrix, values: Vector) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AceError::InvalidInput(
                "non-finite regression target".into(),
            ));
        }
        Self::build(features, Targets::Values(values))
    }

    fn build(features: Matrix, targets: Targets) -> Result<Self> {
        if features.nrows() != targets.len() {
            return Err(AceError::dim(format!(
                "{} feature rows but {} targets",
                features.nrows(),
                targets.len()
            )));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(AceError::InvalidInput("non-finite feature value".into()));
        }
        Ok(Dataset { features, targets })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Label count for classification data.
    pub fn num_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes(m) => Some(m.ncols()),
            Targets::Values(_) => None,
        }
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn labels(&self) -> Option<&Matrix> {
        match &self.targets {
            Targets::Classes(m) => Some(m),
            Targets::Values(_) => None,
        }
    }

    pub fn values(&self) -> Option<&Vector> {
        match &self.targets {
            Targets::Values(v) => Some(v),
            Targets::Classes(_) => None,
        }
    }

    pub fn label(&self, i: usize) -> Option<ProbVector> {
        self.labels()
            .map(|m| ProbVector::from_unchecked(m.row(i).to_owned()))
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), rows),
            targets: self.targets.select(rows),
        }
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Dataset {
        Dataset {
            features: self
                .features
                .slice_axis(Axis(0), Slice::from(start..end))
                .to_owned(),
            targets: self.targets.slice(start, end),
        }
    }

    /// First `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        self.slice(0, n.min(self.len()))
    }

    /// Split off the last `holdout` rows, e.g. as a validation set.
    pub fn split_tail(&self, holdout: usize) -> Result<(Dataset, Dataset)> {
        if holdout == 0 || holdout >= self.len() {
            return Err(AceError::config(
                "validation_holdout",
                format!("{holdout} rows cannot be held out of {}", self.len()),
            ));
        }
        let cut = self.len() - holdout;
        Ok((self.slice(0, cut), self.slice(cut, self.len())))
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            offset,
            needed: 4,
            available: bytes.len().saturating_sub(offset),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = read_u32_be(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic { expected, found });
    }
    Ok(())
}

fn payload(bytes: &[u8], offset: usize, len: usize) -> Result<&[u8], IdxError> {
    let available = bytes.len().saturating_sub(offset);
    if available < len {
        return Err(IdxError::Truncated {
            offset,
            needed: len,
            available,
        });
    }
    if available > len {
        return Err(IdxError::DimensionMismatch {
            offset: offset + len,
            reason: format!(
                "{} trailing bytes after the declared payload",
                available - len
            ),
        });
    }
    Ok(&bytes[offset..])
}

/// Decode an IDX3 image file into `n × (rows · cols)` features scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix, IdxError> {
    check_magic(bytes, IDX_IMAGE_MAGIC)?;
    let n = read_u32_be(bytes, 4)? as usize;
    let rows = read_u32_be(bytes, 8)? as usize;
    let cols = read_u32_be(bytes, 12)? as usize;
    let pixels = payload(bytes, 16, n * rows * cols)?;
    Ok(Matrix::from_shape_vec(
        (n, rows * cols),
        pixels.iter().map(|&b| b as f64 / 255.0).collect(),
    )
    .expect("shape checked against payload"))
}

/// Decode an IDX1 label file into class indices.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    check_magic(bytes, IDX_LABEL_MAGIC)?;
    let n = read_u32_be(bytes, 4)? as usize;
    Ok(payload(bytes, 8, n)?.to_vec())
}

/// Load an MNIST image/label file pair as 1-hot classification data.
pub fn load_mnist_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Dataset> {
    let read = |path: &Path| {
        std::fs::read(path).map_err(|source| AceError::Io {
            path: path.to_owned(),
            source,
        })
    };
    let parse_err = |path: &Path, source| AceError::Parse {
        path: path.to_owned(),
        source,
    };
    let (images_path, labels_path) = (images_path.as_ref(), labels_path.as_ref());
    let features = parse_idx_images(&read(images_path)?).map_err(|e| parse_err(images_path, e))?;
    let labels = parse_idx_labels(&read(labels_path)?).map_err(|e| parse_err(labels_path, e))?;
    if labels.len() != features.nrows() {
        return Err(parse_err(
            labels_path,
            IdxError::DimensionMismatch {
                offset: 4,
                reason: format!(
                    "{} labels for {} images in {}",
                    labels.len(),
                    features.nrows(),
                    images_path.display()
                ),
            },
        ));
    }
    let mut one_hot = Matrix::zeros((labels.len(), MNIST_CLASSES));
    for (i, &label) in labels.iter().enumerate() {
        if label as usize >= MNIST_CLASSES {
            return Err(parse_err(
                labels_path,
                IdxError::LabelOutOfRange {
                    offset: 8 + i,
                    label,
                    classes: MNIST_CLASSES,
                },
            ));
        }
        one_hot[[i, label as usize]] = 1.0;
    }
    Ok(Dataset {
        features,
        targets: Targets::Classes(one_hot),
    })
}

/// Gaussian clusters around seeded centroids.
///
/// Centroid coordinates are uniform in `[-1, 1)`, drawn class by class.
/// Sample `i` belongs to class `i mod classes` and is its centroid plus
/// `spread` times standard normal noise per coordinate. Labels are 1-hot.
pub fn synth_blobs(
    n: usize,
    classes: usize,
    dim: usize,
    spread: f64,
    rng: &mut SeededRng,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(AceError::config(
            "classes",
            format!("need at least 2, got {classes}"),
        ));
    }
    if n < classes {
        return Err(AceError::config(
            "n",
            format!("{n} samples for {classes} classes"),
        ));
    }
    if dim == 0 {
        return Err(AceError::config("dim", "must be at least 1"));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(AceError::config(
            "spread",
            format!("{spread} must be finite and >= 0"),
        ));
    }
    let centroids = Matrix::from_shape_simple_fn((classes, dim), || rng.random_range(-1.0..1.0));
    let mut features = Matrix::zeros((n, dim));
    let mut labels = Matrix::zeros((n, classes));
    for i in 0..n {
        let c = i % classes;
        labels[[i, c]] = 1.0;
        for j in 0..dim {
            let noise: f64 = rng.sample(StandardNormal);
            features[[i, j]] = centroids[[c, j]] + spread * noise;
        }
    }
    Dataset::classification(features, labels)
}

/// The noiseless regression target `sin(w · x)`.
pub fn regression_target(x: &[f64]) -> f64 {
    x.iter()
        .zip(REGRESSION_WEIGHTS)
        .map(|(a, w)| a * w)
        .sum::<f64>()
        .sin()
}

/// `y = sin(w · x) + noise_sd · ε` with `x` uniform in `[-1, 1)^4` and
/// `w =` [`REGRESSION_WEIGHTS`]. Rows are drawn one after another from the
/// stream (four uniforms, then one normal), so a longer dataset from the same
/// seed extends a shorter one.
pub fn synth_regression(n: usize, noise_sd: f64, rng: &mut SeededRng) -> Result<Dataset> {
    if n == 0 {
        return Err(AceError::config("n", "must be at least 1"));
    }
    if !noise_sd.is_finite() || noise_sd < 0.0 {
        return Err(AceError::config(
            "noise_sd",
            format!("{noise_sd} must be finite and >= 0"),
        ));
    }
    let mut features = Matrix::zeros((n, REGRESSION_DIM));
    let mut values = Vector::zeros(n);
    for i in 0..n {
        for j in 0..REGRESSION_DIM {
            features[[i, j]] = rng.random_range(-1.0..1.0);
        }
        let noise: f64 = rng.sample(StandardNormal);
        values[i] = regression_target(features.row(i).as_slice().unwrap()) + noise_sd * noise;
    }
    Dataset::regression(features, values)
}

/// How an epoch is cut into mini-batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub drop_last: bool,
}

impl BatchPlan {
    /// The epoch's row order: `0..n` shuffled with `rand`'s `SliceRandom`
    /// over a [`SeededRng`] keyed by `shuffle_seed`.
    pub fn order(&self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut SeededRng::new(self.shuffle_seed));
        order
    }
}

/// Mini-batches of one epoch in seeded order.
pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    drop_last: bool,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Dataset;

    fn next(&mut self) -> Option<Dataset> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let end = self.pos + remaining.min(self.batch_size);
        let batch = self.data.select(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

pub fn batch_iter<'a>(data: &'a Dataset, plan: &BatchPlan) -> Result<Batches<'a>> {
    if plan.batch_size == 0 || plan.batch_size > data.len() {
        return Err(AceError::config(
            "batch_size",
            format!("{} is not in 1..={}", plan.batch_size, data.len()),
        ));
    }
    Ok(Batches {
        data,
        order: plan.order(data.len()),
        batch_size: plan.batch_size,
        drop_last: plan.drop_last,
        pos: 0,
    })
}

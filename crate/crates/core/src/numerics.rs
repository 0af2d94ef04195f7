//! Dense vector/matrix primitives, the softmax family, and seeded randomness.
//!
//! Vectors and matrices are plain `ndarray` arrays of `f64`. A batch of
//! samples is a [`Matrix`] with one sample per row.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, AsArray, Axis, Ix1};
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AceError, Result};

pub type Vector = Array1<f64>;
pub type Matrix = Array2<f64>;
/// Raw pre-softmax scores.
pub type Logits = Array1<f64>;

/// Tolerance on the unit-sum constraint of a [`ProbVector`].
pub const SIMPLEX_TOL: f64 = 1e-12;

/// A point on the probability simplex with at least two entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vector);

impl ProbVector {
    pub fn new(values: impl Into<Vector>) -> Result<Self> {
        let values = values.into();
        check_simplex(values.view())?;
        Ok(ProbVector(values))
    }

    /// Exact 1-hot vector over `len` labels.
    pub fn one_hot(index: usize, len: usize) -> Result<Self> {
        if len < 2 {
            return Err(AceError::InvalidInput(format!(
                "a distribution needs at least 2 labels, got {len}"
            )));
        }
        if index >= len {
            return Err(AceError::IndexOutOfRange { index, len });
        }
        let mut v = Vector::zeros(len);
        v[index] = 1.0;
        Ok(ProbVector(v))
    }

    pub fn uniform(len: usize) -> Result<Self> {
        Self::new(Vector::from_elem(len, 1.0 / len as f64))
    }

    pub(crate) fn from_unchecked(values: Vector) -> Self {
        debug_assert!(check_simplex(values.view()).is_ok(), "{values}");
        ProbVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn as_array(&self) -> &Vector {
        &self.0
    }

    pub fn into_inner(self) -> Vector {
        self.0
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(self.0.view())
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = AceError;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ProbVector::new(values)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0.to_vec()
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub(crate) fn check_simplex(values: ArrayView1<'_, f64>) -> Result<()> {
    if values.len() < 2 {
        return Err(AceError::InvalidInput(format!(
            "a distribution needs at least 2 labels, got {}",
            values.len()
        )));
    }
    if let Some((i, v)) = values
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0)
    {
        return Err(AceError::InvalidInput(format!(
            "probability entry {i} is {v}"
        )));
    }
    let sum: f64 = values.sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(AceError::InvalidInput(format!(
            "probabilities sum to {sum}, not 1"
        )));
    }
    Ok(())
}

/// Lowest index of the maximum entry.
pub fn argmax(values: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_logits(z: ArrayView1<'_, f64>) -> Result<()> {
    if z.len() < 2 {
        return Err(AceError::InvalidInput(format!(
            "softmax needs at least 2 logits, got {}",
            z.len()
        )));
    }
    if let Some(i) = z.iter().position(|v| !v.is_finite()) {
        return Err(AceError::NonFinite(format!(
            "logit {i} is not finite ({})",
            z[i]
        )));
    }
    Ok(())
}

fn max_of(z: ArrayView1<'_, f64>) -> f64 {
    z.fold(f64::NEG_INFINITY, |m, &v| m.max(v))
}

/// Numerically stable softmax. The maximum logit is subtracted before
/// exponentiation.
pub fn softmax<'a, V: AsArray<'a, f64, Ix1>>(z: V) -> Result<ProbVector> {
    let z = z.into();
    check_logits(z)?;
    Ok(ProbVector::from_unchecked(softmax_unchecked(z)))
}

fn softmax_unchecked(z: ArrayView1<'_, f64>) -> Vector {
    let m = max_of(z);
    let mut e = z.mapv(|v| (v - m).exp());
    let s = e.sum();
    e.mapv_inplace(|v| v / s);
    e
}

/// `z_i - logsumexp(z)` per entry.
pub fn log_softmax<'a, V: AsArray<'a, f64, Ix1>>(z: V) -> Result<Vector> {
    let z = z.into();
    check_logits(z)?;
    let m = max_of(z);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(z.mapv(|v| v - lse))
}

/// Row-wise softmax of a batch of logits.
pub fn softmax_rows(z: ArrayView2<'_, f64>) -> Result<Matrix> {
    if z.ncols() < 2 {
        return Err(AceError::InvalidInput(format!(
            "softmax needs at least 2 logits, got {}",
            z.ncols()
        )));
    }
    if let Some(v) = z.iter().find(|v| !v.is_finite()) {
        return Err(AceError::NonFinite(format!(
            "non-finite logit {v} in batch"
        )));
    }
    let mut out = z.to_owned();
    for mut row in out.rows_mut() {
        let m = max_of(row.view());
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Ok(out)
}

/// `W x + b` where `W` has one row per output.
pub fn affine<'a, V: AsArray<'a, f64, Ix1>>(x: V, w: &Matrix, b: &Vector) -> Result<Vector> {
    let x = x.into();
    if w.ncols() != x.len() || w.nrows() != b.len() {
        return Err(AceError::dim(format!(
            "affine: x has {} entries, W is {}x{}, b has {}",
            x.len(),
            w.nrows(),
            w.ncols(),
            b.len()
        )));
    }
    Ok(w.dot(&x) + b)
}

/// Batched [`affine`]: every row of `x` is mapped to a row of the result.
pub fn affine_batch(x: ArrayView2<'_, f64>, w: &Matrix, b: &Vector) -> Result<Matrix> {
    if w.ncols() != x.ncols() || w.nrows() != b.len() {
        return Err(AceError::dim(format!(
            "affine: batch width {}, W is {}x{}, b has {}",
            x.ncols(),
            w.nrows(),
            w.ncols(),
            b.len()
        )));
    }
    let mut out = x.dot(&w.t());
    out += &b.view().insert_axis(Axis(0));
    Ok(out)
}

/// Purposes for which independent random streams are derived from one
/// experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Data = 3,
    Test = 4,
}

/// SplitMix64 finaliser.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic random stream: ChaCha8 keyed by a 64-bit seed.
///
/// ChaCha8 output is defined independently of platform and word size, so a
/// given seed yields the same stream everywhere. Sub-streams are keyed by
///
/// ```text
/// sub_seed(seed, stream, index) =
///     splitmix64(seed ^ splitmix64(stream as u64 ^ splitmix64(index)))
/// ```
///
/// and never share state with their parent.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sub_seed(seed: u64, stream: Stream, index: u64) -> u64 {
        splitmix64(seed ^ splitmix64(stream as u64 ^ splitmix64(index)))
    }

    pub fn derive(seed: u64, stream: Stream, index: u64) -> Self {
        Self::new(Self::sub_seed(seed, stream, index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

//! Deterministic numeric primitives shared by every other module.
//!
//! All arithmetic is `f64`. Vectors are plain slices at function boundaries;
//! [`DenseVector`] and [`DenseMatrix`] are the owned containers that check the
//! finiteness invariant on construction.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::{Deref, DerefMut};
use thiserror::Error;

/// Norms at or below this are treated as zero.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("vector norm {0:e} is at or below the zero-norm threshold")]
    ZeroNorm(f64),
    #[error("empty input")]
    EmptyInput,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("matrix storage of {len} values does not match {rows}x{cols}")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
}

/// Owned vector of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Result<Self, NumError> {
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn basis(len: usize, axis: usize) -> Self {
        let mut v = vec![0.0; len];
        v[axis] = 1.0;
        Self(v)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for DenseVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for DenseVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<DenseVector> for Vec<f64> {
    fn from(v: DenseVector) -> Self {
        v.0
    }
}

/// Row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        if data.len() != rows * cols {
            return Err(NumError::ShapeMismatch { rows, cols, len: data.len() });
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(NumError::LengthMismatch(cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }
}

fn check_finite(values: &[f64]) -> Result<(), NumError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(NumError::NonFinite(i)),
        None => Ok(()),
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> Result<f64, NumError> {
    if u.len() != v.len() {
        return Err(NumError::LengthMismatch(u.len(), v.len()));
    }
    Ok(dot_unchecked(u, v))
}

/// Dot product for callers that already guarantee equal lengths.
#[inline]
pub(crate) fn dot_unchecked(u: &[f64], v: &[f64]) -> f64 {
    debug_assert_eq!(u.len(), v.len());
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot_unchecked(v, v).sqrt()
}

/// Norm deviation from 1 below which a vector already counts as unit length.
const UNIT_SLACK: f64 = 8.0 * f64::EPSILON;

/// Project onto the unit sphere. Vectors already unit-norm up to rounding are
/// returned unchanged, which makes the projection exactly idempotent.
pub fn l2_normalize(v: &[f64]) -> Result<DenseVector, NumError> {
    let n = norm(v);
    if !(n > EPS_NORM) {
        return Err(NumError::ZeroNorm(n));
    }
    if (n - 1.0).abs() <= UNIT_SLACK {
        return Ok(DenseVector(v.to_vec()));
    }
    Ok(DenseVector(v.iter().map(|x| x / n).collect()))
}

/// `log Σ exp(vᵢ)` with a max shift.
pub fn log_sum_exp(values: &[f64]) -> Result<f64, NumError> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        return Err(NumError::EmptyInput);
    }
    if max == f64::NEG_INFINITY {
        return Ok(max);
    }
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + s.ln())
}

/// Softmax of `logits / temperature`.
pub fn softmax_t(logits: &[f64], temperature: f64) -> Result<DenseVector, NumError> {
    if !(temperature > 0.0) {
        return Err(NumError::NonPositiveTemperature(temperature));
    }
    if logits.is_empty() {
        return Err(NumError::EmptyInput);
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(DenseVector(e.into_iter().map(|x| x / total).collect()))
}

/// Full generator position, enough to resume the stream exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// ChaCha8 counter-based generator.
///
/// The stream is fully determined by the seed and is identical on every
/// platform; the position can be captured with [`SeededRng::state`] and
/// restored with [`SeededRng::from_state`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn state(&self) -> RngState {
        RngState { seed: self.0.get_seed(), stream: self.0.get_stream(), word_pos: self.0.get_word_pos() }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(state.word_pos);
        Self(rng)
    }

    /// Derive an independent child generator (e.g. one per restart).
    pub fn fork(&mut self) -> Self {
        Self(ChaCha8Rng::seed_from_u64(self.0.next_u64()))
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

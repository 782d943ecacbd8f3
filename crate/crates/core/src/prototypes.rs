//! Gating prototypes (fixed, maximally dispersed) and expert prototypes
//! (trainable, with an end-of-epoch closed-form refresh).

use crate::numcore::{dot_unchecked, l2_normalize, norm, DenseMatrix, SeededRng, EPS_NORM};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PrototypeError {
    #[error("{k} clusters cannot be placed with equal pairwise angles in {d} dimensions (need K <= d + 1)")]
    TooManyClusters { k: usize, d: usize },
    #[error("need at least 2 clusters, got {0}")]
    TooFewClusters(usize),
    #[error("cluster label {label} out of range for {k} clusters")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("embedding has dimension {got}, prototypes have {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Fixed unit prototypes for the gating function. Rows have pairwise dot
/// products `-1/(K-1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingPrototypes {
    omega: DenseMatrix,
}

impl GatingPrototypes {
    pub fn matrix(&self) -> &DenseMatrix {
        &self.omega
    }

    pub fn k(&self) -> usize {
        self.omega.rows()
    }

    pub fn dim(&self) -> usize {
        self.omega.cols()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.omega.row(k)
    }

    /// Rebuild from stored rows (checkpoint loading). No geometry is checked.
    pub fn from_matrix(omega: DenseMatrix) -> Self {
        Self { omega }
    }
}

/// Centers of a Max-Mahalanobis distribution: `K` unit vectors in `R^d` with
/// all pairwise inner products equal to `-1/(K-1)`, built row by row with
/// `ω₁ = e₁`.
pub fn mmd_centers(k: usize, d: usize) -> Result<GatingPrototypes, PrototypeError> {
    if k < 2 {
        return Err(PrototypeError::TooFewClusters(k));
    }
    if k > d + 1 {
        return Err(PrototypeError::TooManyClusters { k, d });
    }
    let target = -1.0 / (k as f64 - 1.0);
    let mut omega = DenseMatrix::zeros(k, d);
    omega.row_mut(0)[0] = 1.0;
    for i in 1..k {
        for j in 0..i {
            let (done, rest) = omega.as_mut_slice().split_at_mut(i * d);
            let wj = &done[j * d..(j + 1) * d];
            let wi = &mut rest[..d];
            wi[j] = (target - dot_unchecked(wi, wj)) / wj[j];
        }
        let row = omega.row_mut(i);
        let mut radicand = 1.0 - dot_unchecked(row, row);
        if radicand < 0.0 {
            if radicand < -1e-12 {
                log::warn!("mmd_centers: clamping negative radicand {radicand:e} for row {i}");
            }
            radicand = 0.0;
        }
        // The last row of a K = d+1 simplex has no free coordinate left; its
        // radicand is zero up to rounding.
        if i < d {
            row[i] = radicand.sqrt();
        }
    }
    Ok(GatingPrototypes { omega })
}

/// Trainable expert prototypes, stored raw and normalized wherever they are used.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPrototypes {
    pub mu: DenseMatrix,
}

impl ExpertPrototypes {
    pub fn new(mu: DenseMatrix) -> Self {
        Self { mu }
    }

    /// Rows uniform in `[-1, 1]^d`, then normalized.
    pub fn random(k: usize, d: usize, rng: &mut SeededRng) -> Self {
        let mut mu = DenseMatrix::zeros(k, d);
        for r in 0..k {
            loop {
                let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect();
                if let Ok(unit) = l2_normalize(&row) {
                    mu.row_mut(r).copy_from_slice(&unit);
                    break;
                }
            }
        }
        Self { mu }
    }

    pub fn k(&self) -> usize {
        self.mu.rows()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    /// Row `k` projected onto the unit sphere.
    pub fn normalized_row(&self, k: usize) -> Vec<f64> {
        let row = self.mu.row(k);
        l2_normalize(row).map_or_else(|_| row.to_vec(), |v| v.into_inner())
    }

    pub fn normalized(&self) -> DenseMatrix {
        let rows: Vec<Vec<f64>> = (0..self.k()).map(|k| self.normalized_row(k)).collect();
        DenseMatrix::from_rows(&rows).unwrap_or_else(|_| self.mu.clone())
    }
}

/// Running per-cluster sums of teacher embeddings under hard assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeAccumulator {
    pub mu_hat: DenseMatrix,
    pub counts: Vec<u64>,
}

impl PrototypeAccumulator {
    pub fn new(k: usize, d: usize) -> Self {
        Self { mu_hat: DenseMatrix::zeros(k, d), counts: vec![0; k] }
    }

    pub fn reset(&mut self) {
        self.mu_hat.as_mut_slice().fill(0.0);
        self.counts.fill(0);
    }

    /// Add `embedding` (the teacher embedding under the assigned expert) to
    /// cluster `label` (0-based).
    pub fn accumulate(&mut self, embedding: &[f64], label: usize) -> Result<(), PrototypeError> {
        let k = self.counts.len();
        if label >= k {
            return Err(PrototypeError::LabelOutOfRange { label, k });
        }
        if embedding.len() != self.mu_hat.cols() {
            return Err(PrototypeError::DimensionMismatch { expected: self.mu_hat.cols(), got: embedding.len() });
        }
        for (a, v) in self.mu_hat.row_mut(label).iter_mut().zip(embedding) {
            *a += v;
        }
        self.counts[label] += 1;
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }
}

/// `μ_k = μ̂_k / ‖μ̂_k‖`; clusters whose sum vanishes keep their previous
/// (normalized) prototype.
pub fn analytical_update(acc: &PrototypeAccumulator, previous: &ExpertPrototypes) -> ExpertPrototypes {
    let mut mu = previous.normalized();
    for k in 0..acc.mu_hat.rows() {
        let sum = acc.mu_hat.row(k);
        if norm(sum) > EPS_NORM {
            if let Ok(unit) = l2_normalize(sum) {
                mu.row_mut(k).copy_from_slice(&unit);
            }
        }
    }
    ExpertPrototypes { mu }
}

//! External clustering metrics: NMI, ACC and ARI.

use pathfinding::prelude::{kuhn_munkres, Matrix};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricError {
    #[error("label vectors differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {0} labels")]
    TooFewLabels(usize),
}

/// Counts of co-occurring (true class, predicted cluster) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    counts: Vec<Vec<u64>>,
    row_sums: Vec<u64>,
    col_sums: Vec<u64>,
    total: u64,
}

fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    for &l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    // Re-number in sorted order so the table layout is label-order stable.
    let sorted: BTreeMap<usize, usize> = ids.keys().enumerate().map(|(i, &l)| (l, i)).collect();
    (labels.iter().map(|l| sorted[l]).collect(), sorted.len())
}

impl ContingencyTable {
    pub fn new(truth: &[usize], pred: &[usize]) -> Result<Self, MetricError> {
        if truth.len() != pred.len() {
            return Err(MetricError::LengthMismatch(truth.len(), pred.len()));
        }
        let (t, kt) = compact(truth);
        let (p, kp) = compact(pred);
        let mut counts = vec![vec![0u64; kp]; kt];
        for (&a, &b) in t.iter().zip(&p) {
            counts[a][b] += 1;
        }
        let row_sums = counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums = (0..kp).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        Ok(Self { counts, row_sums, col_sums, total: truth.len() as u64 })
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn row_sums(&self) -> &[u64] {
        &self.row_sums
    }

    pub fn col_sums(&self) -> &[u64] {
        &self.col_sums
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

fn entropy(marginal: &[u64], n: f64) -> f64 {
    marginal
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with arithmetic-mean normalization.
pub fn nmi(truth: &[usize], pred: &[usize]) -> Result<f64, MetricError> {
    let table = ContingencyTable::new(truth, pred)?;
    if table.total == 0 {
        return Err(MetricError::TooFewLabels(1));
    }
    let n = table.total as f64;
    let ht = entropy(&table.row_sums, n);
    let hp = entropy(&table.col_sums, n);
    if ht == 0.0 && hp == 0.0 {
        return Ok(1.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (table.row_sums[i] as f64 * table.col_sums[j] as f64)).ln();
            }
        }
    }
    Ok((mi / (0.5 * (ht + hp))).clamp(0.0, 1.0))
}

/// Cluster accuracy under the best one-to-one matching of clusters to classes.
pub fn acc(truth: &[usize], pred: &[usize]) -> Result<f64, MetricError> {
    let table = ContingencyTable::new(truth, pred)?;
    if table.total == 0 {
        return Err(MetricError::TooFewLabels(1));
    }
    let size = table.row_sums.len().max(table.col_sums.len());
    let mut weights = Matrix::new(size, size, 0i64);
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            weights[(i, j)] = c as i64;
        }
    }
    let (matched, _) = kuhn_munkres(&weights);
    Ok(matched as f64 / table.total as f64)
}

fn choose2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index via pair counting on the contingency table.
pub fn ari(truth: &[usize], pred: &[usize]) -> Result<f64, MetricError> {
    let table = ContingencyTable::new(truth, pred)?;
    if table.total < 2 {
        return Err(MetricError::TooFewLabels(2));
    }
    let index: f64 = table.counts.iter().flatten().map(|&c| choose2(c)).sum();
    let a: f64 = table.row_sums.iter().map(|&c| choose2(c)).sum();
    let b: f64 = table.col_sums.iter().map(|&c| choose2(c)).sum();
    let expected = a * b / choose2(table.total);
    let max = 0.5 * (a + b);
    if max == expected {
        // Both partitions trivial (all singletons or one block).
        return Ok(if index == max { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

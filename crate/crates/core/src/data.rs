//! Datasets: synthetic generation on the unit sphere and CSV persistence.
//!
//! Ground-truth labels are 0-based in memory and 1-based on disk. Surrogate
//! labels are row indices and are never stored.

use crate::numcore::{l2_normalize, DenseMatrix, SeededRng};
use crate::prototypes::mmd_centers;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: expected {expected} values, found {got}")]
    DimensionMismatch { line: u64, expected: usize, got: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Recipe for a mixture of von Mises-Fisher-like clusters on the sphere.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    pub d_input: usize,
    pub n_per_cluster: usize,
    /// Larger is tighter; `f64::INFINITY` puts every point on its direction.
    pub concentration: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n_clusters: 4, d_input: 16, n_per_cluster: 500, concentration: 50.0, seed: 0 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_clusters == 0 || self.d_input == 0 || self.n_per_cluster == 0 {
            return Err(DataError::InvalidSpec("counts and dimensions must be positive".into()));
        }
        if !(self.concentration > 0.0) {
            return Err(DataError::InvalidSpec(format!("concentration must be positive, got {}", self.concentration)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    points: DenseMatrix,
    truth: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(points: DenseMatrix, truth: Option<Vec<usize>>) -> Result<Self, DataError> {
        if let Some(t) = &truth {
            if t.len() != points.rows() {
                return Err(DataError::DimensionMismatch { line: 0, expected: points.rows(), got: t.len() });
            }
        }
        Ok(Self { points, truth })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }

    pub fn points(&self) -> &DenseMatrix {
        &self.points
    }

    /// Ground-truth classes, 0-based, if known.
    pub fn truth(&self) -> Option<&[usize]> {
        self.truth.as_deref()
    }

    pub fn surrogate_label(&self, i: usize) -> usize {
        i
    }

    pub fn without_truth(&self) -> Self {
        Self { points: self.points.clone(), truth: None }
    }
}

fn random_direction(d: usize, rng: &mut SeededRng) -> Vec<f64> {
    loop {
        let raw: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = l2_normalize(&raw) {
            return u.into_inner();
        }
    }
}

/// Sample a dataset: `normalize(direction_k + ε/√concentration)`, shuffled.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed);
    let (k, d) = (spec.n_clusters, spec.d_input);
    let directions: Vec<Vec<f64>> = if k >= 2 && k <= d + 1 {
        let omega = mmd_centers(k, d).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
        (0..k).map(|i| omega.row(i).to_vec()).collect()
    } else {
        (0..k).map(|_| random_direction(d, &mut rng)).collect()
    };
    let scale = 1.0 / spec.concentration.sqrt();
    let mut samples = Vec::with_capacity(k * spec.n_per_cluster);
    for (label, dir) in directions.iter().enumerate() {
        for _ in 0..spec.n_per_cluster {
            let point = loop {
                let raw: Vec<f64> = dir
                    .iter()
                    .map(|&c| {
                        let z: f64 = rng.sample(StandardNormal);
                        c + scale * z
                    })
                    .collect();
                if let Ok(u) = l2_normalize(&raw) {
                    break u.into_inner();
                }
            };
            samples.push((point, label));
        }
    }
    samples.shuffle(&mut rng);
    let (rows, truth): (Vec<Vec<f64>>, Vec<usize>) = samples.into_iter().unzip();
    let points = DenseMatrix::from_rows(&rows).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    Dataset::new(points, Some(truth))
}

pub fn write_csv<W: Write>(ds: &Dataset, out: W) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("dim_{j}")).collect();
    if ds.truth.is_some() {
        header.push("truth".into());
    }
    w.write_record(&header).map_err(csv_io)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.point(i).iter().map(|x| format!("{x:?}")).collect();
        if let Some(t) = &ds.truth {
            rec.push((t[i] + 1).to_string());
        }
        w.write_record(&rec).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> DataError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DataError::Io(io),
        other => DataError::Parse { line: 0, message: format!("{other:?}") },
    }
}

pub fn read_csv<R: Read>(input: R) -> Result<Dataset, DataError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let header = r.headers().map_err(|e| parse_err(1, e))?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let has_truth = names.last() == Some(&"truth");
    let dim = names.len() - usize::from(has_truth);
    for (j, name) in names[..dim].iter().enumerate() {
        if *name != format!("dim_{j}") {
            return Err(DataError::Parse { line: 1, message: format!("expected column dim_{j}, found {name:?}") });
        }
    }
    if dim == 0 {
        return Err(DataError::Parse { line: 1, message: "no feature columns".into() });
    }

    let mut values = Vec::new();
    let mut truth = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e)
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != names.len() {
            return Err(DataError::DimensionMismatch { line, expected: names.len(), got: rec.len() });
        }
        for field in rec.iter().take(dim) {
            let x: f64 = field
                .trim()
                .parse()
                .map_err(|_| DataError::Parse { line, message: format!("not a number: {field:?}") })?;
            if !x.is_finite() {
                return Err(DataError::Parse { line, message: format!("non-finite value {field:?}") });
            }
            values.push(x);
        }
        if has_truth {
            let field = rec[dim].trim();
            let t: usize = field.parse().ok().filter(|&t| t >= 1).ok_or_else(|| DataError::Parse {
                line,
                message: format!("truth label must be a positive integer, found {field:?}"),
            })?;
            truth.push(t - 1);
        }
        rows += 1;
    }
    let points =
        DenseMatrix::from_vec(rows, dim, values).map_err(|e| DataError::Parse { line: 0, message: e.to_string() })?;
    Dataset::new(points, has_truth.then_some(truth))
}

fn parse_err(line: u64, e: csv::Error) -> DataError {
    DataError::Parse { line, message: e.to_string() }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    write_csv(ds, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
}

//! Reference algorithms: spherical k-means, the InfoNCE loss, the two-stage
//! contrastive-then-cluster pipeline and the executable k-means equivalence
//! check.

use crate::data::Dataset;
use crate::model::{argmax_first, hard_assign, log_phi, posterior, ModelFlags, PosteriorMatrix};
use crate::numcore::{dot_unchecked, l2_normalize, log_sum_exp, DenseMatrix, SeededRng};
use crate::prototypes::{analytical_update, ExpertPrototypes, PrototypeAccumulator};
use crate::trainer::{fit, teacher_embeddings, TrainConfig, TrainError, TrainState};
use rand::seq::index::sample;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("the equivalence check requires uniform gating, a single head and the class term")]
    FlagMismatch,
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// 0-based cluster per point.
    pub labels: Vec<usize>,
    pub centroids: DenseMatrix,
    /// `Σ_n x_nᵀ c_{label(n)}` at the returned labels and centroids.
    pub objective: f64,
    pub iterations: usize,
    /// Objective after every centroid update.
    pub history: Vec<f64>,
}

fn assign(points: &[Vec<f64>], centroids: &DenseMatrix) -> Vec<usize> {
    points
        .par_iter()
        .map(|x| {
            let sims: Vec<f64> = centroids.iter_rows().map(|c| dot_unchecked(x, c)).collect();
            argmax_first(&sims)
        })
        .collect()
}

fn update(points: &[Vec<f64>], labels: &[usize], previous: &DenseMatrix) -> DenseMatrix {
    let mut acc = PrototypeAccumulator::new(previous.rows(), previous.cols());
    for (x, &l) in points.iter().zip(labels) {
        // labels come from `assign`, always in range
        let _ = acc.accumulate(x, l);
    }
    analytical_update(&acc, &ExpertPrototypes::new(previous.clone())).mu
}

fn objective(points: &[Vec<f64>], labels: &[usize], centroids: &DenseMatrix) -> f64 {
    points.iter().zip(labels).map(|(x, &l)| dot_unchecked(x, centroids.row(l))).sum()
}

/// Lloyd iterations on the sphere from the given initial centroids. Stops at
/// a label fixpoint, after `max_iters` updates, or when an update improves the
/// objective by no more than `tol`.
pub fn spherical_kmeans(
    points: &[Vec<f64>],
    init: &DenseMatrix,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansResult, BaselineError> {
    let k = init.rows();
    if k == 0 || k > points.len() {
        return Err(BaselineError::InvalidInput(format!("need 1 <= K <= N, got K = {k}, N = {}", points.len())));
    }
    if points.iter().any(|p| p.len() != init.cols()) {
        return Err(BaselineError::InvalidInput("point and centroid dimensions differ".into()));
    }
    if points.iter().any(|p| (dot_unchecked(p, p) - 1.0).abs() > 1e-9) {
        return Err(BaselineError::InvalidInput("points must be unit-norm".into()));
    }
    let mut centroids = ExpertPrototypes::new(init.clone()).normalized();
    let mut labels: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;
    for it in 0..max_iters.max(1) {
        let next = assign(points, &centroids);
        if it > 0 && next == labels {
            break;
        }
        labels = next;
        centroids = update(points, &labels, &centroids);
        iterations = it + 1;
        let obj = objective(points, &labels, &centroids);
        let gain = history.last().map_or(f64::INFINITY, |&prev| obj - prev);
        history.push(obj);
        if gain <= tol {
            break;
        }
    }
    Ok(KMeansResult { objective: objective(points, &labels, &centroids), labels, centroids, iterations, history })
}

/// Best of `restarts` runs, each initialized from `K` distinct data points.
pub fn spherical_kmeans_restarts(
    points: &[Vec<f64>],
    k: usize,
    restarts: usize,
    max_iters: usize,
    rng: &mut SeededRng,
) -> Result<KMeansResult, BaselineError> {
    if k == 0 || k > points.len() {
        return Err(BaselineError::InvalidInput(format!("need 1 <= K <= N, got K = {k}, N = {}", points.len())));
    }
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let idx = sample(rng, points.len(), k);
        let rows: Vec<Vec<f64>> = idx.iter().map(|i| points[i].clone()).collect();
        let init = DenseMatrix::from_rows(&rows).map_err(|e| BaselineError::InvalidInput(e.to_string()))?;
        let res = spherical_kmeans(points, &init, max_iters, 0.0)?;
        if best.as_ref().is_none_or(|b| res.objective > b.objective) {
            best = Some(res);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// `−log[exp(vᵀf/τ) / (exp(vᵀf/τ) + Σᵢ exp(qᵢᵀf/τ))]`.
pub fn infonce_loss(f: &[f64], v: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64, BaselineError> {
    if negatives.is_empty() {
        return Err(BaselineError::InvalidInput("empty negative set".into()));
    }
    if v.len() != f.len() || negatives.iter().any(|q| q.len() != f.len()) {
        return Err(BaselineError::InvalidInput("dimension mismatch".into()));
    }
    let pos = dot_unchecked(v, f) / tau;
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(pos);
    logits.extend(negatives.iter().map(|q| dot_unchecked(q, f) / tau));
    let lse = log_sum_exp(&logits).map_err(|e| BaselineError::InvalidInput(e.to_string()))?;
    Ok(lse - pos)
}

/// Contrastive pre-training (uniform gating, one head, no class term)
/// followed by spherical k-means on the final teacher embeddings.
pub fn two_stage_pipeline(config: &TrainConfig, dataset: &Dataset) -> Result<KMeansResult, BaselineError> {
    let mut cfg = config.clone();
    cfg.set_flags(ModelFlags::moco());
    let (state, _) = fit(&cfg, dataset)?;
    let v: Vec<Vec<f64>> = teacher_embeddings(&state, dataset)?.into_iter().map(|mut b| b.swap_remove(0)).collect();
    let mut rng = SeededRng::new(cfg.seed ^ 0x6b6d_6561_6e73);
    spherical_kmeans_restarts(&v, cfg.n_clusters, cfg.kmeans_restarts, 100, &mut rng)
}

/// Outcome of comparing the simplified model update against one k-means step.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansStepReport {
    pub equivalent: bool,
    pub labels_equal: bool,
    pub max_prototype_diff: f64,
    pub model_labels: Vec<usize>,
    pub kmeans_labels: Vec<usize>,
}

/// Model path: posterior `q(k) ∝ exp(vᵀμ̄_k/τ)` (uniform prior, unnormalized
/// expert), hard assignment, analytical update from `mu_model`. K-means path:
/// one spherical k-means iteration from centroids `mu_kmeans`.
pub fn kmeans_step_compare(
    v: &[Vec<f64>],
    mu_model: &ExpertPrototypes,
    mu_kmeans: &ExpertPrototypes,
    tau: f64,
) -> Result<KMeansStepReport, BaselineError> {
    let k = mu_model.k();
    let flags = ModelFlags { uniform_gating: true, single_head: true, no_class_term: false };
    let uniform = vec![1.0 / k as f64; k];
    let zero = vec![0.0; mu_model.dim()];
    let rows: Vec<Vec<f64>> = v
        .iter()
        .map(|vn| {
            // f = 0 leaves only the prototype term, vᵀμ̄_k/τ
            let lp = log_phi(std::slice::from_ref(vn), std::slice::from_ref(&zero), mu_model, tau, &flags)
                .map_err(|e| BaselineError::InvalidInput(e.to_string()))?;
            posterior(&uniform, &lp, &vec![0.0; k]).map_err(|e| BaselineError::InvalidInput(e.to_string()))
        })
        .collect::<Result<_, _>>()?;
    let q = PosteriorMatrix::from_rows(&rows).map_err(|e| BaselineError::InvalidInput(e.to_string()))?;
    let model_labels = hard_assign(&q);
    let mut acc = PrototypeAccumulator::new(k, mu_model.dim());
    for (vn, &l) in v.iter().zip(&model_labels) {
        acc.accumulate(vn, l).map_err(|e| BaselineError::InvalidInput(e.to_string()))?;
    }
    let updated = analytical_update(&acc, mu_model);

    let km = spherical_kmeans(v, &mu_kmeans.mu, 1, f64::NEG_INFINITY)?;
    let max_prototype_diff =
        updated.mu.as_slice().iter().zip(km.centroids.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let labels_equal = model_labels == km.labels;
    Ok(KMeansStepReport {
        equivalent: labels_equal && max_prototype_diff <= 1e-12,
        labels_equal,
        max_prototype_diff,
        model_labels,
        kmeans_labels: km.labels,
    })
}

/// Checks, on the state's (single-head) teacher embeddings of `dataset`, that
/// the model's hard-assignment update equals one spherical k-means iteration
/// started from the current prototypes.
pub fn kmeans_step_check(
    state: &TrainState,
    config: &TrainConfig,
    dataset: &Dataset,
) -> Result<KMeansStepReport, BaselineError> {
    let flags = config.flags();
    if !flags.uniform_gating || !flags.single_head || flags.no_class_term {
        return Err(BaselineError::FlagMismatch);
    }
    let v: Vec<Vec<f64>> = teacher_embeddings(state, dataset)?.into_iter().map(|mut b| b.swap_remove(0)).collect();
    kmeans_step_compare(&v, &state.mu, &state.mu, config.tau)
}

/// Unit vector helper shared by the verification suites.
pub(crate) fn random_unit(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    use rand::Rng;
    loop {
        let raw: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Ok(u) = l2_normalize(&raw) {
            return u.into_inner();
        }
    }
}

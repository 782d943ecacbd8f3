//! The probabilistic core: gating distribution, expert scores, the queue-based
//! normalization estimate, the variational posterior and the ELBO.
//!
//! For a datapoint with student embeddings `f_k`, teacher embeddings `v_k`
//! and gating embedding `g`:
//!
//! ```text
//! gate(k)      = softmax_k(ω_kᵀ g / κ)
//! log Φ(k)     = v_kᵀ (f_k + μ̄_k) / τ              μ̄_k = μ_k / ‖μ_k‖
//! log Ẑ(k)     = LSE({log Φ(k)} ∪ {q_{i,k}ᵀ (f_k + μ̄_k) / τ}_i)
//! q(k)         ∝ gate(k) · Φ(k) / Ẑ(k)
//! ELBO         = Σ_k q(k) [log gate(k) + log Φ(k) − log Ẑ(k) − log q(k)]
//! ```
//!
//! All probability arithmetic is carried out in log space.

use crate::numcore::{dot_unchecked, log_sum_exp, DenseMatrix, NumError};
use crate::prototypes::{ExpertPrototypes, GatingPrototypes};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("the embedding queue is empty")]
    EmptyQueue,
    #[error("posterior terms are not finite")]
    DegenerateDistribution,
    #[error("invalid posterior matrix: {0}")]
    InvalidPosterior(String),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Ablation switches that collapse the model toward plain contrastive learning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ModelFlags {
    /// Uniform prior `p(z|x) = 1/K`; the gating network is ignored.
    pub uniform_gating: bool,
    /// One student/teacher output layer shared by all experts.
    pub single_head: bool,
    /// Drop the prototype term from the expert score.
    pub no_class_term: bool,
}

impl ModelFlags {
    pub fn moco() -> Self {
        Self { uniform_gating: true, single_head: true, no_class_term: true }
    }

    /// Number of expert output layers the encoders carry for `k` clusters.
    pub fn heads(&self, k: usize) -> usize {
        if self.single_head {
            1
        } else {
            k
        }
    }

    #[inline]
    fn head(&self, k: usize) -> usize {
        if self.single_head {
            0
        } else {
            k
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperatures {
    pub tau: f64,
    pub kappa: f64,
}

impl Temperatures {
    pub fn new(tau: f64, kappa: f64) -> Result<Self, ModelError> {
        for t in [tau, kappa] {
            if !(t > 0.0) || !t.is_finite() {
                return Err(ModelError::NonPositiveTemperature(t));
            }
        }
        Ok(Self { tau, kappa })
    }
}

impl Default for Temperatures {
    fn default() -> Self {
        Self { tau: 1.0, kappa: 1.0 }
    }
}

/// Which terms enter the normalization estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZhatMode {
    /// Positive pair plus every queue entry.
    #[default]
    WithPositive,
    /// Queue entries only. With the whole dataset in the queue this is the
    /// exact normalization constant.
    QueueOnly,
}

/// Settings shared by every model evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ModelSpec {
    pub temps: Temperatures,
    pub flags: ModelFlags,
    pub zhat: ZhatMode,
}

/// FIFO ring buffer of teacher embedding blocks (one row per expert head).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingQueue {
    capacity: usize,
    heads: usize,
    dim: usize,
    /// Slot the next block is written to.
    next: usize,
    fill: usize,
    /// Layout `[head][slot][dim]` so each head's rows are contiguous.
    data: Vec<f64>,
}

impl EmbeddingQueue {
    pub fn new(capacity: usize, heads: usize, dim: usize) -> Self {
        Self { capacity, heads, dim, next: 0, fill: 0, data: vec![0.0; heads * capacity * dim] }
    }

    /// Queue holding exactly `blocks`, oldest first.
    pub fn from_blocks(blocks: &[Vec<Vec<f64>>]) -> Result<Self, ModelError> {
        let heads = blocks.first().map_or(0, Vec::len);
        let dim = blocks.first().and_then(|b| b.first()).map_or(0, Vec::len);
        let mut q = Self::new(blocks.len(), heads, dim);
        for b in blocks {
            q.push(b)?;
        }
        Ok(q)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fill(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    /// Enqueue one block, evicting the oldest when full.
    pub fn push(&mut self, block: &[Vec<f64>]) -> Result<(), ModelError> {
        if block.len() != self.heads || block.iter().any(|r| r.len() != self.dim) {
            return Err(ModelError::DimensionMismatch(format!("queue expects {}x{} blocks", self.heads, self.dim)));
        }
        if self.capacity == 0 {
            return Ok(());
        }
        for (h, row) in block.iter().enumerate() {
            let off = (h * self.capacity + self.next) * self.dim;
            self.data[off..off + self.dim].copy_from_slice(row);
        }
        self.next = (self.next + 1) % self.capacity;
        self.fill = (self.fill + 1).min(self.capacity);
        Ok(())
    }

    fn oldest(&self) -> usize {
        if self.fill < self.capacity {
            0
        } else {
            self.next
        }
    }

    /// Row of the `i`-th oldest block for head `h`.
    pub fn row(&self, i: usize, h: usize) -> &[f64] {
        let slot = (self.oldest() + i) % self.capacity;
        let off = (h * self.capacity + slot) * self.dim;
        &self.data[off..off + self.dim]
    }

    /// Rows of head `h`, oldest first.
    pub fn head_rows(&self, h: usize) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.fill).map(move |i| self.row(i, h))
    }

    /// Blocks, oldest first.
    pub fn blocks(&self) -> Vec<Vec<Vec<f64>>> {
        (0..self.fill).map(|i| (0..self.heads).map(|h| self.row(i, h).to_vec()).collect()).collect()
    }

    /// Raw ring state for checkpointing: `(next, fill, data)`.
    pub fn raw_parts(&self) -> (usize, usize, &[f64]) {
        (self.next, self.fill, &self.data)
    }

    pub fn from_raw_parts(
        capacity: usize,
        heads: usize,
        dim: usize,
        next: usize,
        fill: usize,
        data: Vec<f64>,
    ) -> Result<Self, ModelError> {
        if data.len() != heads * capacity * dim || fill > capacity || (capacity > 0 && next >= capacity) {
            return Err(ModelError::DimensionMismatch("inconsistent queue state".into()));
        }
        Ok(Self { capacity, heads, dim, next, fill, data })
    }
}

/// Row-stochastic `B × K` matrix of variational posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix(DenseMatrix);

impl PosteriorMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        for (i, r) in rows.iter().enumerate() {
            let s: f64 = r.iter().sum();
            if r.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (s - 1.0).abs() > 1e-9 {
                return Err(ModelError::InvalidPosterior(format!("row {i} is not a distribution")));
            }
        }
        Ok(Self(DenseMatrix::from_rows(rows)?))
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn k(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    /// Mean row entropy (nats).
    pub fn mean_entropy(&self) -> f64 {
        if self.rows() == 0 {
            return 0.0;
        }
        let total: f64 =
            self.0.iter_rows().map(|r| -r.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()).sum();
        total / self.rows() as f64
    }
}

fn check_unit_rows(name: &str, rows: &[Vec<f64>], count: usize, dim: usize) -> Result<(), ModelError> {
    if rows.len() != count || rows.iter().any(|r| r.len() != dim) {
        return Err(ModelError::DimensionMismatch(format!("{name}: expected {count} rows of dimension {dim}")));
    }
    Ok(())
}

/// Log of the gating distribution.
pub fn log_gating(g: &[f64], omega: &GatingPrototypes, kappa: f64, flags: &ModelFlags) -> Result<Vec<f64>, ModelError> {
    let k = omega.k();
    if flags.uniform_gating {
        return Ok(vec![-(k as f64).ln(); k]);
    }
    if g.len() != omega.dim() {
        return Err(ModelError::DimensionMismatch(format!(
            "gating embedding has dimension {}, prototypes {}",
            g.len(),
            omega.dim()
        )));
    }
    if !(kappa > 0.0) {
        return Err(NumError::NonPositiveTemperature(kappa).into());
    }
    let logits: Vec<f64> = (0..k).map(|j| dot_unchecked(omega.row(j), g) / kappa).collect();
    let lse = log_sum_exp(&logits)?;
    Ok(logits.into_iter().map(|a| a - lse).collect())
}

/// `p(z = k | x)`: softmax of cosine similarities to the gating prototypes.
pub fn gating_dist(
    g: &[f64],
    omega: &GatingPrototypes,
    kappa: f64,
    flags: &ModelFlags,
) -> Result<Vec<f64>, ModelError> {
    if flags.uniform_gating {
        let k = omega.k();
        return Ok(vec![1.0 / k as f64; k]);
    }
    Ok(log_gating(g, omega, kappa, flags)?.into_iter().map(f64::exp).collect())
}

/// Per-expert score vectors `s_k = f_k + μ̄_k` (or `f_k` without the class term).
fn scores(f: &[Vec<f64>], mu_bar: &DenseMatrix, flags: &ModelFlags) -> Vec<Vec<f64>> {
    (0..mu_bar.rows())
        .map(|k| {
            let fk = &f[flags.head(k)];
            if flags.no_class_term {
                fk.clone()
            } else {
                fk.iter().zip(mu_bar.row(k)).map(|(a, b)| a + b).collect()
            }
        })
        .collect()
}

fn check_embeddings(
    f: &[Vec<f64>],
    v: &[Vec<f64>],
    mu: &ExpertPrototypes,
    flags: &ModelFlags,
) -> Result<(), ModelError> {
    let heads = flags.heads(mu.k());
    check_unit_rows("student embeddings", f, heads, mu.dim())?;
    check_unit_rows("teacher embeddings", v, heads, mu.dim())
}

/// `log Φ(x, y, k)` for every expert.
pub fn log_phi(
    v: &[Vec<f64>],
    f: &[Vec<f64>],
    mu: &ExpertPrototypes,
    tau: f64,
    flags: &ModelFlags,
) -> Result<Vec<f64>, ModelError> {
    check_embeddings(f, v, mu, flags)?;
    let s = scores(f, &mu.normalized(), flags);
    Ok(s.iter().enumerate().map(|(k, sk)| dot_unchecked(&v[flags.head(k)], sk) / tau).collect())
}

/// `log Ẑ(x, k)` from the queue (and, by default, the positive pair).
pub fn log_zhat(
    f: &[Vec<f64>],
    v: &[Vec<f64>],
    queue: &EmbeddingQueue,
    mu: &ExpertPrototypes,
    tau: f64,
    flags: &ModelFlags,
    mode: ZhatMode,
) -> Result<Vec<f64>, ModelError> {
    check_embeddings(f, v, mu, flags)?;
    if queue.is_empty() {
        return Err(ModelError::EmptyQueue);
    }
    check_queue(queue, mu, flags)?;
    let s = scores(f, &mu.normalized(), flags);
    s.iter()
        .enumerate()
        .map(|(k, sk)| {
            let h = flags.head(k);
            let mut terms = Vec::with_capacity(queue.fill() + 1);
            if mode == ZhatMode::WithPositive {
                terms.push(dot_unchecked(&v[h], sk) / tau);
            }
            terms.extend(queue.head_rows(h).map(|q| dot_unchecked(q, sk) / tau));
            Ok(log_sum_exp(&terms)?)
        })
        .collect()
}

fn check_queue(queue: &EmbeddingQueue, mu: &ExpertPrototypes, flags: &ModelFlags) -> Result<(), ModelError> {
    if queue.heads() != flags.heads(mu.k()) || queue.dim() != mu.dim() {
        return Err(ModelError::DimensionMismatch(format!(
            "queue blocks are {}x{}, model needs {}x{}",
            queue.heads(),
            queue.dim(),
            flags.heads(mu.k()),
            mu.dim()
        )));
    }
    Ok(())
}

/// `q(k) ∝ gating(k) · exp(log_phi(k) − log_zhat(k))`, normalized in log space.
pub fn posterior(gating: &[f64], log_phi: &[f64], log_zhat: &[f64]) -> Result<Vec<f64>, ModelError> {
    if gating.len() != log_phi.len() || gating.len() != log_zhat.len() {
        return Err(ModelError::DimensionMismatch("posterior inputs differ in length".into()));
    }
    let r: Vec<f64> = gating.iter().zip(log_phi).zip(log_zhat).map(|((g, p), z)| g.ln() + p - z).collect();
    log_posterior_from_terms(&r).map(|lq| lq.into_iter().map(f64::exp).collect())
}

fn log_posterior_from_terms(r: &[f64]) -> Result<Vec<f64>, ModelError> {
    if r.iter().any(|x| x.is_nan()) {
        return Err(ModelError::DegenerateDistribution);
    }
    let lse = log_sum_exp(r)?;
    if !lse.is_finite() {
        return Err(ModelError::DegenerateDistribution);
    }
    Ok(r.iter().map(|x| x - lse).collect())
}

/// Per-row argmax, ties to the lowest index. Labels are 0-based.
pub fn hard_assign(q: &PosteriorMatrix) -> Vec<usize> {
    q.matrix().iter_rows().map(argmax_first).collect()
}

pub(crate) fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Embeddings of one datapoint as consumed by the objective.
#[derive(Debug, Clone, Copy)]
pub struct ItemEmbeddings<'a> {
    /// Student embeddings, one per head.
    pub f: &'a [Vec<f64>],
    /// Teacher embeddings, one per head (no gradient).
    pub v: &'a [Vec<f64>],
    /// Gating embedding.
    pub g: &'a [f64],
}

/// How the posterior enters the objective's gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PosteriorMode<'a> {
    /// `q` is computed from the current parameters and differentiated through.
    Joint,
    /// `q` is computed from the current parameters and treated as a constant.
    Detached,
    /// A given posterior (e.g. from an earlier E-step), held constant.
    Fixed(&'a PosteriorMatrix),
}

/// Batch objective and its gradients.
#[derive(Debug, Clone)]
pub struct ElboOutput {
    /// Mean ELBO over the batch.
    pub elbo: f64,
    /// `-elbo`.
    pub loss: f64,
    pub per_item: Vec<f64>,
    /// Posterior computed from the current parameters.
    pub posterior: PosteriorMatrix,
    /// `∂loss/∂f`, per item and head.
    pub grad_f: Vec<Vec<Vec<f64>>>,
    /// `∂loss/∂g`, per item.
    pub grad_g: Vec<Vec<f64>>,
    /// `∂loss/∂μ` with respect to the raw (unnormalized) prototypes.
    pub grad_mu: DenseMatrix,
}

struct ItemResult {
    elbo: f64,
    q: Vec<f64>,
    grad_f: Vec<Vec<f64>>,
    grad_g: Vec<f64>,
    grad_mu_bar: Vec<Vec<f64>>,
}

/// Objective and gradient for one datapoint. Gradients are of the ELBO itself
/// (ascent direction); the caller rescales.
fn item_objective(
    item: &ItemEmbeddings<'_>,
    queue: &EmbeddingQueue,
    mu_bar: &DenseMatrix,
    omega: &GatingPrototypes,
    spec: &ModelSpec,
    fixed_q: Option<&[f64]>,
    joint: bool,
) -> Result<ItemResult, ModelError> {
    let flags = &spec.flags;
    let tau = spec.temps.tau;
    let k_count = mu_bar.rows();
    let dim = mu_bar.cols();
    let with_pos = spec.zhat == ZhatMode::WithPositive;

    let s = scores(item.f, mu_bar, flags);
    let mut log_expert = vec![0.0; k_count];
    // d log_expert_k / d s_k
    let mut dle_ds = vec![vec![0.0; dim]; k_count];
    let mut logits = Vec::with_capacity(queue.fill() + 1);
    for k in 0..k_count {
        let h = flags.head(k);
        let sk = &s[k];
        let vh = &item.v[h];
        let l_pos = dot_unchecked(vh, sk) / tau;
        logits.clear();
        if with_pos {
            logits.push(l_pos);
        }
        logits.extend(queue.head_rows(h).map(|q| dot_unchecked(q, sk) / tau));
        let lz = log_sum_exp(&logits)?;
        log_expert[k] = l_pos - lz;

        let grad = &mut dle_ds[k];
        let mut offset = 0;
        let mut pos_weight = 1.0;
        if with_pos {
            pos_weight -= (logits[0] - lz).exp();
            offset = 1;
        }
        for (gi, vi) in grad.iter_mut().zip(vh) {
            *gi = pos_weight * vi;
        }
        for (i, q) in queue.head_rows(h).enumerate() {
            let p = (logits[offset + i] - lz).exp();
            for (gi, qi) in grad.iter_mut().zip(q) {
                *gi -= p * qi;
            }
        }
        grad.iter_mut().for_each(|x| *x /= tau);
    }

    let log_gate = log_gating(item.g, omega, spec.temps.kappa, flags)?;
    let r: Vec<f64> = log_gate.iter().zip(&log_expert).map(|(a, b)| a + b).collect();
    let log_q = log_posterior_from_terms(&r)?;
    let q: Vec<f64> = log_q.iter().map(|x| x.exp()).collect();

    let (elbo, grad_r) = match fixed_q {
        Some(qf) => {
            let elbo = qf.iter().zip(&r).filter(|(&p, _)| p > 0.0).map(|(p, rk)| p * (rk - p.ln())).sum();
            (elbo, qf.to_vec())
        }
        None => {
            let elbo: f64 = q.iter().zip(&r).zip(&log_q).map(|((p, rk), lq)| p * (rk - lq)).sum();
            let grad_r = if joint {
                // ∂/∂r_j Σ_k q_k (r_k − log q_k) with q = softmax(r)
                let c: Vec<f64> = r.iter().zip(&log_q).map(|(rk, lq)| rk - lq - 1.0).collect();
                let mean_c: f64 = q.iter().zip(&c).map(|(p, ck)| p * ck).sum();
                q.iter().zip(&c).map(|(p, ck)| p + p * (ck - mean_c)).collect()
            } else {
                q.clone()
            };
            (elbo, grad_r)
        }
    };

    let heads = item.f.len();
    let mut grad_f = vec![vec![0.0; dim]; heads];
    let mut grad_mu_bar = vec![vec![0.0; dim]; k_count];
    for k in 0..k_count {
        let w = grad_r[k];
        if w == 0.0 {
            continue;
        }
        let gf = &mut grad_f[flags.head(k)];
        for (a, b) in gf.iter_mut().zip(&dle_ds[k]) {
            *a += w * b;
        }
        if !flags.no_class_term {
            for (a, b) in grad_mu_bar[k].iter_mut().zip(&dle_ds[k]) {
                *a += w * b;
            }
        }
    }

    let mut grad_g = vec![0.0; item.g.len()];
    if !flags.uniform_gating {
        // log_gate = a − LSE(a), a_j = ω_jᵀ g / κ
        let gate: Vec<f64> = log_gate.iter().map(|x| x.exp()).collect();
        let total: f64 = grad_r.iter().sum();
        for j in 0..k_count {
            let ga = grad_r[j] - gate[j] * total;
            for (a, w) in grad_g.iter_mut().zip(omega.row(j)) {
                *a += ga * w / spec.temps.kappa;
            }
        }
    }

    Ok(ItemResult { elbo, q, grad_f, grad_g, grad_mu_bar })
}

/// Mean ELBO over a batch, with gradients of `loss = −ELBO` flowing into the
/// student embeddings, gating embeddings and raw expert prototypes.
pub fn elbo_batch(
    items: &[ItemEmbeddings<'_>],
    queue: &EmbeddingQueue,
    mu: &ExpertPrototypes,
    omega: &GatingPrototypes,
    spec: &ModelSpec,
    mode: PosteriorMode<'_>,
) -> Result<ElboOutput, ModelError> {
    use rayon::prelude::*;

    if items.is_empty() {
        return Err(ModelError::DimensionMismatch("empty batch".into()));
    }
    if queue.is_empty() {
        return Err(ModelError::EmptyQueue);
    }
    check_queue(queue, mu, &spec.flags)?;
    if omega.k() != mu.k() || omega.dim() != mu.dim() {
        return Err(ModelError::DimensionMismatch("gating and expert prototypes differ in shape".into()));
    }
    for it in items {
        check_embeddings(it.f, it.v, mu, &spec.flags)?;
        if !spec.flags.uniform_gating && it.g.len() != mu.dim() {
            return Err(ModelError::DimensionMismatch("gating embedding dimension".into()));
        }
    }
    if let PosteriorMode::Fixed(q) = mode {
        if q.rows() != items.len() || q.k() != mu.k() {
            return Err(ModelError::DimensionMismatch("fixed posterior shape".into()));
        }
    }

    let mu_bar = mu.normalized();
    let results: Vec<ItemResult> = items
        .par_iter()
        .enumerate()
        .map(|(n, item)| {
            let fixed = match mode {
                PosteriorMode::Fixed(q) => Some(q.row(n)),
                _ => None,
            };
            item_objective(item, queue, &mu_bar, omega, spec, fixed, mode == PosteriorMode::Joint)
        })
        .collect::<Result<_, _>>()?;

    let b = items.len() as f64;
    let scale = -1.0 / b;
    let k_count = mu.k();
    let dim = mu.dim();
    let mut grad_mu_bar = vec![vec![0.0; dim]; k_count];
    let mut per_item = Vec::with_capacity(results.len());
    let mut q_rows = Vec::with_capacity(results.len());
    let mut grad_f = Vec::with_capacity(results.len());
    let mut grad_g = Vec::with_capacity(results.len());
    for res in results {
        per_item.push(res.elbo);
        q_rows.push(res.q);
        for (acc, g) in grad_mu_bar.iter_mut().zip(&res.grad_mu_bar) {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        grad_f.push(res.grad_f.into_iter().map(|g| g.into_iter().map(|x| x * scale).collect()).collect());
        grad_g.push(res.grad_g.into_iter().map(|x| x * scale).collect());
    }

    // Chain through μ̄ = μ/‖μ‖: (I − μ̄μ̄ᵀ)/‖μ‖
    let mut grad_mu = DenseMatrix::zeros(k_count, dim);
    for k in 0..k_count {
        let n = crate::numcore::norm(mu.mu.row(k));
        let mb = mu_bar.row(k);
        let gb = &grad_mu_bar[k];
        let proj = dot_unchecked(mb, gb);
        for (out, (g, m)) in grad_mu.row_mut(k).iter_mut().zip(gb.iter().zip(mb)) {
            *out = scale * (g - m * proj) / n;
        }
    }

    let elbo = per_item.iter().sum::<f64>() / b;
    Ok(ElboOutput {
        elbo,
        loss: -elbo,
        per_item,
        posterior: PosteriorMatrix(DenseMatrix::from_rows(&q_rows)?),
        grad_f,
        grad_g,
        grad_mu,
    })
}

/// Dataset-wide quantities with the exact normalization constant, where every
/// point's teacher embeddings are the candidate set.
pub struct ExactModel<'a> {
    pub f: &'a [Vec<Vec<f64>>],
    pub g: &'a [Vec<f64>],
    pub v: &'a [Vec<Vec<f64>>],
    pub mu: &'a ExpertPrototypes,
    pub omega: &'a GatingPrototypes,
    pub temps: Temperatures,
    pub flags: ModelFlags,
}

impl ExactModel<'_> {
    fn full_queue(&self) -> Result<EmbeddingQueue, ModelError> {
        EmbeddingQueue::from_blocks(self.v)
    }

    /// Per point: `log p(k|x_n)` and `log p(y_n|x_n,k)`, exact.
    fn log_terms(&self) -> Result<Vec<(Vec<f64>, Vec<f64>)>, ModelError> {
        let queue = self.full_queue()?;
        (0..self.f.len())
            .map(|n| {
                let lg = log_gating(&self.g[n], self.omega, self.temps.kappa, &self.flags)?;
                let lp = log_phi(&self.v[n], &self.f[n], self.mu, self.temps.tau, &self.flags)?;
                let lz = log_zhat(
                    &self.f[n],
                    &self.v[n],
                    &queue,
                    self.mu,
                    self.temps.tau,
                    &self.flags,
                    ZhatMode::QueueOnly,
                )?;
                let ll = lp.iter().zip(&lz).map(|(a, b)| a - b).collect();
                Ok((lg, ll))
            })
            .collect()
    }

    /// Exact Bayes posterior for every point.
    pub fn posterior(&self) -> Result<PosteriorMatrix, ModelError> {
        let rows = self
            .log_terms()?
            .into_iter()
            .map(|(lg, ll)| {
                let r: Vec<f64> = lg.iter().zip(&ll).map(|(a, b)| a + b).collect();
                Ok(log_posterior_from_terms(&r)?.into_iter().map(f64::exp).collect())
            })
            .collect::<Result<Vec<Vec<f64>>, ModelError>>()?;
        PosteriorMatrix::from_rows(&rows)
    }

    /// `Σ_n log p(y_n | x_n)`.
    pub fn log_likelihood(&self) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for (lg, ll) in self.log_terms()? {
            let r: Vec<f64> = lg.iter().zip(&ll).map(|(a, b)| a + b).collect();
            total += log_sum_exp(&r)?;
        }
        Ok(total)
    }

    /// `Σ_n Σ_k q(k|n) [log p(k|x_n) + log p(y_n|x_n,k) − log q(k|n)]`.
    pub fn elbo(&self, q: &PosteriorMatrix) -> Result<f64, ModelError> {
        if q.rows() != self.f.len() {
            return Err(ModelError::DimensionMismatch("posterior rows vs dataset size".into()));
        }
        let mut total = 0.0;
        for (n, (lg, ll)) in self.log_terms()?.into_iter().enumerate() {
            for (k, &p) in q.row(n).iter().enumerate() {
                if p > 0.0 {
                    total += p * (lg[k] + ll[k] - p.ln());
                }
            }
        }
        Ok(total)
    }
}

/// Exact ELBO summed over the dataset.
pub fn exact_elbo(model: &ExactModel<'_>, q: &PosteriorMatrix) -> Result<f64, ModelError> {
    model.elbo(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{l2_normalize, SeededRng};
    use crate::prototypes::mmd_centers;
    use rand::Rng;

    fn unit(rng: &mut SeededRng, d: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        l2_normalize(&raw).unwrap().into_inner()
    }

    fn e(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn gating_examples() {
        let omega = mmd_centers(2, 2).unwrap();
        let flags = ModelFlags::default();
        // g ⟂ both prototypes → uniform
        let p = gating_dist(&[0.0, 1.0], &omega, 1.0, &flags).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15);
        // dots (1, -1): softmax gives e/(e+e^-1); with dots (1,0) we need a
        // non-antipodal pair, so use explicit prototypes.
        let omega = GatingPrototypes::from_matrix(DenseMatrix::from_rows(&[e(2, 0), e(2, 1)]).unwrap());
        let p = gating_dist(&[1.0, 0.0], &omega, 1.0, &flags).unwrap();
        let ee = std::f64::consts::E;
        assert!((p[0] - ee / (ee + 1.0)).abs() < 1e-15 && (p[1] - 1.0 / (ee + 1.0)).abs() < 1e-15);
        let uniform = ModelFlags { uniform_gating: true, ..Default::default() };
        assert_eq!(gating_dist(&[1.0, 0.0], &omega, 1.0, &uniform).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn log_phi_examples() {
        let d = 3;
        let mu = ExpertPrototypes::new(DenseMatrix::from_rows(&[e(d, 0)]).unwrap());
        let flags = ModelFlags::default();
        assert_eq!(log_phi(&[e(d, 0)], &[e(d, 0)], &mu, 1.0, &flags).unwrap(), vec![2.0]);
        assert_eq!(log_phi(&[e(d, 2)], &[e(d, 0)], &mu, 1.0, &flags).unwrap(), vec![0.0]);
        let mut rng = SeededRng::new(1);
        let mu = ExpertPrototypes::random(3, d, &mut rng);
        let f: Vec<_> = (0..3).map(|_| unit(&mut rng, d)).collect();
        let v: Vec<_> = (0..3).map(|_| unit(&mut rng, d)).collect();
        let a = log_phi(&v, &f, &mu, 1.0, &flags).unwrap();
        let b = log_phi(&v, &f, &mu, 0.5, &flags).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((2.0 * x - y).abs() < 1e-14);
        }
        assert!(log_phi(&v[..2], &f, &mu, 1.0, &flags).is_err());
    }

    #[test]
    fn log_zhat_two_equal_terms() {
        let mut rng = SeededRng::new(2);
        let d = 4;
        let mu = ExpertPrototypes::random(2, d, &mut rng);
        let f: Vec<_> = (0..2).map(|_| unit(&mut rng, d)).collect();
        let v: Vec<_> = (0..2).map(|_| unit(&mut rng, d)).collect();
        let flags = ModelFlags::default();
        let queue = EmbeddingQueue::from_blocks(&[v.clone()]).unwrap();
        let lz = log_zhat(&f, &v, &queue, &mu, 1.0, &flags, ZhatMode::WithPositive).unwrap();
        let lp = log_phi(&v, &f, &mu, 1.0, &flags).unwrap();
        for (z, p) in lz.iter().zip(&lp) {
            assert!((z - (2f64.ln() + p)).abs() < 1e-14);
        }
        let empty = EmbeddingQueue::new(4, 2, d);
        assert_eq!(log_zhat(&f, &v, &empty, &mu, 1.0, &flags, ZhatMode::WithPositive), Err(ModelError::EmptyQueue));
    }

    #[test]
    fn queue_fifo() {
        let blk = |x: f64| vec![vec![x, 0.0]];
        let mut q = EmbeddingQueue::new(2, 1, 2);
        q.push(&blk(1.0)).unwrap();
        assert_eq!(q.blocks(), vec![blk(1.0)]);
        q.push(&blk(2.0)).unwrap();
        q.push(&blk(3.0)).unwrap();
        assert_eq!(q.fill(), 2);
        assert_eq!(q.blocks(), vec![blk(2.0), blk(3.0)]);
        assert!(q.push(&[vec![1.0]]).is_err());
    }

    #[test]
    fn posterior_examples() {
        let p = posterior(&[0.25; 4], &[0.3; 4], &[1.1; 4]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let p = posterior(&[0.2, 0.5, 0.3], &[800.0, -900.0, 0.0], &[0.0, 0.0, 0.0]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(posterior(&[0.5, 0.5], &[f64::NAN, 0.0], &[0.0, 0.0]), Err(ModelError::DegenerateDistribution));
    }

    #[test]
    fn hard_assign_examples() {
        let q = PosteriorMatrix::from_rows(&[vec![0.1, 0.7, 0.2], vec![0.4, 0.3, 0.3]]).unwrap();
        assert_eq!(hard_assign(&q), vec![1, 0]);
        let tie = PosteriorMatrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(hard_assign(&tie), vec![0]);
        // scale invariance of argmax over unnormalized terms
        let raw = [0.3, 0.9, 0.1];
        let scaled: Vec<f64> = raw.iter().map(|x| x * 7.5).collect();
        assert_eq!(argmax_first(&raw), argmax_first(&scaled));
    }

    #[test]
    fn single_expert_has_no_kl() {
        let mut rng = SeededRng::new(4);
        let d = 3;
        let mu = ExpertPrototypes::random(1, d, &mut rng);
        let omega = GatingPrototypes::from_matrix(DenseMatrix::from_rows(&[e(d, 0)]).unwrap());
        let f = vec![unit(&mut rng, d)];
        let v = vec![unit(&mut rng, d)];
        let g = unit(&mut rng, d);
        let queue = EmbeddingQueue::from_blocks(&[vec![unit(&mut rng, d)], vec![unit(&mut rng, d)]]).unwrap();
        let spec = ModelSpec::default();
        let out =
            elbo_batch(&[ItemEmbeddings { f: &f, v: &v, g: &g }], &queue, &mu, &omega, &spec, PosteriorMode::Joint)
                .unwrap();
        let lp = log_phi(&v, &f, &mu, 1.0, &spec.flags).unwrap()[0];
        let lz = log_zhat(&f, &v, &queue, &mu, 1.0, &spec.flags, spec.zhat).unwrap()[0];
        assert!((out.elbo - (lp - lz)).abs() < 1e-14);
        assert_eq!(out.posterior.row(0), &[1.0]);
    }

    #[test]
    fn exact_posterior_is_elbo_maximizer() {
        let mut rng = SeededRng::new(6);
        let (n, k, d) = (20, 3, 4);
        let f: Vec<Vec<Vec<f64>>> = (0..n).map(|_| (0..k).map(|_| unit(&mut rng, d)).collect()).collect();
        let v: Vec<Vec<Vec<f64>>> = (0..n).map(|_| (0..k).map(|_| unit(&mut rng, d)).collect()).collect();
        let g: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let mu = ExpertPrototypes::random(k, d, &mut rng);
        let omega = mmd_centers(k, d).unwrap();
        let model = ExactModel {
            f: &f,
            g: &g,
            v: &v,
            mu: &mu,
            omega: &omega,
            temps: Temperatures::default(),
            flags: ModelFlags::default(),
        };
        let post = model.posterior().unwrap();
        let best = exact_elbo(&model, &post).unwrap();
        assert!((best - model.log_likelihood().unwrap()).abs() < 1e-9);
        for _ in 0..100 {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let raw: Vec<f64> = post.row(i).iter().map(|p| p * rng.random_range(0.5..1.5)).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|x| x / s).collect()
                })
                .collect();
            let perturbed = PosteriorMatrix::from_rows(&rows).unwrap();
            assert!(exact_elbo(&model, &perturbed).unwrap() <= best + 1e-12);
        }
    }

    struct Instance {
        f: Vec<Vec<Vec<f64>>>,
        v: Vec<Vec<Vec<f64>>>,
        g: Vec<Vec<f64>>,
        queue: EmbeddingQueue,
        mu: ExpertPrototypes,
        omega: GatingPrototypes,
    }

    fn instance(seed: u64, b: usize, k: usize, d: usize, nu: usize, flags: &ModelFlags) -> Instance {
        let mut rng = SeededRng::new(seed);
        let heads = flags.heads(k);
        let rows = |rng: &mut SeededRng| -> Vec<Vec<f64>> { (0..heads).map(|_| unit(rng, d)).collect() };
        let f = (0..b).map(|_| rows(&mut rng)).collect();
        let v = (0..b).map(|_| rows(&mut rng)).collect();
        let blocks: Vec<_> = (0..nu).map(|_| rows(&mut rng)).collect();
        let g = (0..b).map(|_| unit(&mut rng, d)).collect();
        let mut mu = ExpertPrototypes::random(k, d, &mut rng);
        // raw prototypes off the sphere so the normalization Jacobian matters
        for x in mu.mu.as_mut_slice() {
            *x *= 1.7;
        }
        Instance {
            f,
            v,
            g,
            queue: EmbeddingQueue::from_blocks(&blocks).unwrap(),
            mu,
            omega: mmd_centers(k, d).unwrap(),
        }
    }

    fn loss_of(inst: &Instance, spec: &ModelSpec, mode: PosteriorMode<'_>) -> ElboOutput {
        let items: Vec<_> =
            (0..inst.f.len()).map(|n| ItemEmbeddings { f: &inst.f[n], v: &inst.v[n], g: &inst.g[n] }).collect();
        elbo_batch(&items, &inst.queue, &inst.mu, &inst.omega, spec, mode).unwrap()
    }

    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    fn check_fd(flags: ModelFlags, zhat: ZhatMode, mode: PosteriorMode<'_>) {
        let spec = ModelSpec { temps: Temperatures::new(0.5, 0.7).unwrap(), flags, zhat };
        let mut inst = instance(11, 4, 3, 4, 8, &flags);
        let out = loss_of(&inst, &spec, mode);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        macro_rules! probe {
            ($slot:expr, $analytic:expr) => {{
                let orig = $slot;
                $slot = orig + h;
                let up = loss_of(&inst, &spec, mode).loss;
                $slot = orig - h;
                let down = loss_of(&inst, &spec, mode).loss;
                $slot = orig;
                worst = worst.max(rel_err($analytic, (up - down) / (2.0 * h)));
            }};
        }
        for n in 0..inst.f.len() {
            for hd in 0..inst.f[n].len() {
                for j in 0..4 {
                    probe!(inst.f[n][hd][j], out.grad_f[n][hd][j]);
                }
            }
            for j in 0..4 {
                probe!(inst.g[n][j], out.grad_g[n][j]);
            }
        }
        for i in 0..inst.mu.mu.as_slice().len() {
            probe!(inst.mu.mu.as_mut_slice()[i], out.grad_mu.as_slice()[i]);
        }
        assert!(worst < 1e-6, "max relative error {worst}");
    }

    #[test]
    fn elbo_gradients_match_finite_differences() {
        check_fd(ModelFlags::default(), ZhatMode::WithPositive, PosteriorMode::Joint);
        check_fd(ModelFlags::default(), ZhatMode::QueueOnly, PosteriorMode::Joint);
        check_fd(ModelFlags { single_head: true, ..Default::default() }, ZhatMode::WithPositive, PosteriorMode::Joint);
        check_fd(
            ModelFlags { no_class_term: true, ..Default::default() },
            ZhatMode::WithPositive,
            PosteriorMode::Joint,
        );
    }

    #[test]
    fn fixed_posterior_gradients_match_finite_differences() {
        let q = PosteriorMatrix::from_rows(&vec![vec![0.2, 0.5, 0.3]; 4]).unwrap();
        check_fd(ModelFlags::default(), ZhatMode::QueueOnly, PosteriorMode::Fixed(&q));
    }

    #[test]
    fn detached_and_joint_gradients_coincide_at_the_posterior() {
        let flags = ModelFlags::default();
        let spec = ModelSpec { flags, ..Default::default() };
        let inst = instance(12, 5, 4, 6, 10, &flags);
        let a = loss_of(&inst, &spec, PosteriorMode::Joint);
        let b = loss_of(&inst, &spec, PosteriorMode::Detached);
        assert_eq!(a.loss, b.loss);
        for (x, y) in a.grad_mu.as_slice().iter().zip(b.grad_mu.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.grad_g.iter().flatten().zip(b.grad_g.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn elbo_at_posterior_is_log_marginal_estimate() {
        let flags = ModelFlags::default();
        let spec = ModelSpec { flags, ..Default::default() };
        let inst = instance(13, 3, 3, 5, 6, &flags);
        let out = loss_of(&inst, &spec, PosteriorMode::Joint);
        for n in 0..3 {
            let lg = log_gating(&inst.g[n], &inst.omega, 1.0, &flags).unwrap();
            let lp = log_phi(&inst.v[n], &inst.f[n], &inst.mu, 1.0, &flags).unwrap();
            let lz = log_zhat(&inst.f[n], &inst.v[n], &inst.queue, &inst.mu, 1.0, &flags, spec.zhat).unwrap();
            let r: Vec<f64> = (0..3).map(|k| lg[k] + lp[k] - lz[k]).collect();
            assert!((out.per_item[n] - log_sum_exp(&r).unwrap()).abs() < 1e-12);
            let q = posterior(&gating_dist(&inst.g[n], &inst.omega, 1.0, &flags).unwrap(), &lp, &lz).unwrap();
            for (a, b) in q.iter().zip(out.posterior.row(n)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    /// Brute-force Bayes posterior: every Φ summed over the dataset in plain loops.
    fn brute_posterior(
        f: &[Vec<Vec<f64>>],
        g: &[Vec<f64>],
        v: &[Vec<Vec<f64>>],
        mu: &ExpertPrototypes,
        omega: &GatingPrototypes,
        tau: f64,
        kappa: f64,
    ) -> Vec<Vec<f64>> {
        let k = mu.k();
        let mub = mu.normalized();
        let n_pts = f.len();
        (0..n_pts)
            .map(|n| {
                let gate_raw: Vec<f64> = (0..k)
                    .map(|j| (omega.row(j).iter().zip(&g[n]).map(|(a, b)| a * b).sum::<f64>() / kappa).exp())
                    .collect();
                let gs: f64 = gate_raw.iter().sum();
                let joint: Vec<f64> = (0..k)
                    .map(|j| {
                        let s: Vec<f64> = f[n][j].iter().zip(mub.row(j)).map(|(a, b)| a + b).collect();
                        let phi = |i: usize| (v[i][j].iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / tau).exp();
                        let z: f64 = (0..n_pts).map(phi).sum();
                        gate_raw[j] / gs * phi(n) / z
                    })
                    .collect();
                let t: f64 = joint.iter().sum();
                joint.into_iter().map(|x| x / t).collect()
            })
            .collect()
    }

    #[test]
    fn full_queue_posterior_matches_brute_force() {
        let flags = ModelFlags::default();
        let inst = instance(14, 60, 3, 5, 1, &flags);
        let model = ExactModel {
            f: &inst.f,
            g: &inst.g,
            v: &inst.v,
            mu: &inst.mu,
            omega: &inst.omega,
            temps: Temperatures::default(),
            flags,
        };
        let got = model.posterior().unwrap();
        let want = brute_posterior(&inst.f, &inst.g, &inst.v, &inst.mu, &inst.omega, 1.0, 1.0);
        for n in 0..60 {
            for k in 0..3 {
                assert!((got.row(n)[k] - want[n][k]).abs() < 1e-10);
            }
        }
        // the batch path agrees when its queue is the whole dataset
        let queue = EmbeddingQueue::from_blocks(&inst.v).unwrap();
        let items: Vec<_> = (0..60).map(|n| ItemEmbeddings { f: &inst.f[n], v: &inst.v[n], g: &inst.g[n] }).collect();
        let spec = ModelSpec { zhat: ZhatMode::QueueOnly, ..Default::default() };
        let out = elbo_batch(&items, &queue, &inst.mu, &inst.omega, &spec, PosteriorMode::Joint).unwrap();
        for n in 0..60 {
            for k in 0..3 {
                assert!((out.posterior.row(n)[k] - want[n][k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn exact_elbo_matches_term_by_term_sum() {
        let flags = ModelFlags::default();
        let inst = instance(15, 50, 3, 4, 1, &flags);
        let (tau, kappa) = (0.8, 1.3);
        let model = ExactModel {
            f: &inst.f,
            g: &inst.g,
            v: &inst.v,
            mu: &inst.mu,
            omega: &inst.omega,
            temps: Temperatures::new(tau, kappa).unwrap(),
            flags,
        };
        let mut rng = SeededRng::new(3);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| {
                let r: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..1.0)).collect();
                let s: f64 = r.iter().sum();
                r.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let q = PosteriorMatrix::from_rows(&rows).unwrap();
        let mub = inst.mu.normalized();
        let mut want = 0.0;
        for n in 0..50 {
            let gate_raw: Vec<f64> = (0..3)
                .map(|j| (inst.omega.row(j).iter().zip(&inst.g[n]).map(|(a, b)| a * b).sum::<f64>() / kappa).exp())
                .collect();
            let gs: f64 = gate_raw.iter().sum();
            for j in 0..3 {
                let s: Vec<f64> = inst.f[n][j].iter().zip(mub.row(j)).map(|(a, b)| a + b).collect();
                let phi = |i: usize| (inst.v[i][j].iter().zip(&s).map(|(a, b)| a * b).sum::<f64>() / tau).exp();
                let z: f64 = (0..50).map(phi).sum();
                let qk = rows[n][j];
                want += qk * ((gate_raw[j] / gs).ln() + (phi(n) / z).ln() - qk.ln());
            }
        }
        let got = exact_elbo(&model, &q).unwrap();
        assert!((got - want).abs() < 1e-10 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn normalizer_estimate_bound() {
        let mut rng = SeededRng::new(16);
        let tau = 0.7;
        for trial in 0..50 {
            let flags = ModelFlags::default();
            let inst = instance(100 + trial, 40, 3, 5, 1, &flags);
            let nu = rng.random_range(1..=40);
            let queue = EmbeddingQueue::from_blocks(&inst.v[..nu]).unwrap();
            let full = EmbeddingQueue::from_blocks(&inst.v).unwrap();
            for n in 0..40 {
                let lz = log_zhat(&inst.f[n], &inst.v[n], &full, &inst.mu, tau, &flags, ZhatMode::QueueOnly).unwrap();
                let bound = 40f64.ln() - (nu as f64).ln() + 4.0 / tau;
                for mode in [ZhatMode::WithPositive, ZhatMode::QueueOnly] {
                    let lzh = log_zhat(&inst.f[n], &inst.v[n], &queue, &inst.mu, tau, &flags, mode).unwrap();
                    for k in 0..3 {
                        assert!(lz[k] - lzh[k] <= bound);
                    }
                }
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn posterior_rows_sum_to_one(seed in 0u64..u64::MAX, single: bool, no_class: bool, uniform: bool, log_tau in -1.0f64..1.0) {
            let flags = ModelFlags { uniform_gating: uniform, single_head: single, no_class_term: no_class };
            let spec = ModelSpec { temps: Temperatures::new(10f64.powf(log_tau), 1.0).unwrap(), flags, zhat: ZhatMode::WithPositive };
            let inst = instance(seed, 3, 4, 5, 5, &flags);
            let out = loss_of(&inst, &spec, PosteriorMode::Joint);
            for n in 0..3 {
                let s: f64 = out.posterior.row(n).iter().sum();
                proptest::prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

//! Scalable EM training: per-batch posterior and SGD on the negative ELBO,
//! EMA teacher, queue maintenance and the end-of-epoch prototype update.

use crate::data::Dataset;
use crate::encoder::{
    augment, backward_into, ema_update, forward_gating, forward_student, forward_teacher, AugmentConfig, EncoderError,
    EncoderParams, EncoderShape, GradientBundle, TapedOutput, TeacherParams,
};
use crate::metrics;
use crate::model::{
    elbo_batch, gating_dist, hard_assign, log_phi, log_zhat, posterior, ElboOutput, EmbeddingQueue, ExactModel,
    ItemEmbeddings, ModelError, ModelFlags, ModelSpec, PosteriorMatrix, PosteriorMode, Temperatures, ZhatMode,
};
use crate::numcore::{DenseMatrix, SeededRng};
use crate::prototypes::{
    analytical_update, mmd_centers, ExpertPrototypes, GatingPrototypes, PrototypeAccumulator, PrototypeError,
};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

/// Items per backward work unit. Fixed so gradient sums do not depend on the
/// thread count.
const GRAD_CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: u64, detail: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub n_clusters: usize,
    /// Trunk layer widths (tanh).
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub tau: f64,
    pub kappa: f64,
    pub queue_size: usize,
    pub ema_momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    /// Fractions of `epochs` at which the learning rate is multiplied by `lr_decay`.
    pub lr_milestones: Vec<f64>,
    pub lr_decay: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub uniform_gating: bool,
    pub single_head: bool,
    pub no_class_term: bool,
    pub detach_posterior: bool,
    /// Include the positive pair in the normalization estimate.
    pub zhat_positive: bool,
    pub aug_noise: f64,
    pub aug_dropout: f64,
    /// Restarts for the k-means stage of the two-stage baseline.
    pub kmeans_restarts: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_clusters: 10,
            hidden: vec![64],
            embed_dim: 16,
            tau: 1.0,
            kappa: 1.0,
            queue_size: 1024,
            ema_momentum: 0.999,
            batch_size: 256,
            epochs: 200,
            lr_initial: 1.0,
            lr_milestones: vec![0.48, 0.64, 0.80],
            lr_decay: 0.1,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            uniform_gating: false,
            single_head: false,
            no_class_term: false,
            detach_posterior: false,
            zhat_positive: true,
            aug_noise: 0.1,
            aug_dropout: 0.1,
            kmeans_restarts: 10,
        }
    }
}

impl TrainConfig {
    pub fn flags(&self) -> ModelFlags {
        ModelFlags {
            uniform_gating: self.uniform_gating,
            single_head: self.single_head,
            no_class_term: self.no_class_term,
        }
    }

    pub fn set_flags(&mut self, flags: ModelFlags) {
        self.uniform_gating = flags.uniform_gating;
        self.single_head = flags.single_head;
        self.no_class_term = flags.no_class_term;
    }

    pub fn temperatures(&self) -> Temperatures {
        Temperatures { tau: self.tau, kappa: self.kappa }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            temps: self.temperatures(),
            flags: self.flags(),
            zhat: if self.zhat_positive { ZhatMode::WithPositive } else { ZhatMode::QueueOnly },
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig { noise_std: self.aug_noise, dropout: self.aug_dropout }
    }

    pub fn encoder_shape(&self, input_dim: usize) -> EncoderShape {
        EncoderShape {
            input_dim,
            trunk_widths: self.hidden.clone(),
            embed_dim: self.embed_dim,
            expert_heads: self.flags().heads(self.n_clusters),
        }
    }

    /// Step schedule evaluated from the epoch index alone.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch >= (m * self.epochs as f64).round() as usize).count();
        self.lr_initial * self.lr_decay.powi(passed as i32)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        for (name, v) in
            [("tau", self.tau), ("kappa", self.kappa), ("lr_initial", self.lr_initial), ("lr_decay", self.lr_decay)]
        {
            if !(v > 0.0) || !v.is_finite() {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if self.n_clusters < 2 {
            return bad(format!("n_clusters must be at least 2, got {}", self.n_clusters));
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if self.n_clusters > self.embed_dim + 1 {
            return bad(format!("n_clusters = {} exceeds embed_dim + 1 = {}", self.n_clusters, self.embed_dim + 1));
        }
        if self.queue_size == 0 {
            return bad("queue_size must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return bad(format!("ema_momentum must lie in [0, 1), got {}", self.ema_momentum));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return bad(format!("sgd_momentum must lie in [0, 1), got {}", self.sgd_momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.aug_noise >= 0.0) || !(0.0..1.0).contains(&self.aug_dropout) {
            return bad("aug_noise must be non-negative and aug_dropout in [0, 1)".into());
        }
        let mut prev = 0.0;
        for &m in &self.lr_milestones {
            if !(m > prev && m < 1.0) {
                return bad(format!(
                    "lr_milestones must be strictly increasing in (0, 1), got {:?}",
                    self.lr_milestones
                ));
            }
            prev = m;
        }
        if self.kmeans_restarts == 0 {
            return bad("kmeans_restarts must be positive".into());
        }
        Ok(())
    }
}

/// Momentum buffers for every trained tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub student: EncoderParams,
    pub mu: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub student: EncoderParams,
    pub teacher: TeacherParams,
    pub mu: ExpertPrototypes,
    pub omega: GatingPrototypes,
    pub queue: EmbeddingQueue,
    pub momentum: SgdState,
    pub accumulator: PrototypeAccumulator,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub rng: SeededRng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub elbo: f64,
    pub posterior_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub elbo: f64,
    pub posterior_entropy: f64,
    /// Hard-assignment counts per cluster over the epoch.
    pub occupancy: Vec<u64>,
    pub nmi: Option<f64>,
    pub acc: Option<f64>,
    pub ari: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// 0-based cluster labels.
    pub labels: Vec<usize>,
    pub posterior: PosteriorMatrix,
}

fn check_dataset(config: &TrainConfig, dataset: &Dataset) -> Result<(), TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    config.validate()?;
    let _ = dataset.dim();
    Ok(())
}

pub fn init_state(config: &TrainConfig, dataset: &Dataset) -> Result<TrainState, TrainError> {
    check_dataset(config, dataset)?;
    let mut rng = SeededRng::new(config.seed);
    let shape = config.encoder_shape(dataset.dim());
    let student = EncoderParams::init(&shape, &mut rng);
    let teacher = student.teacher_copy();
    let omega = mmd_centers(config.n_clusters, config.embed_dim)?;
    let mu = ExpertPrototypes::random(config.n_clusters, config.embed_dim, &mut rng);

    let heads = shape.expert_heads;
    let mut queue = EmbeddingQueue::new(config.queue_size, heads, config.embed_dim);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let aug = config.augment();
    let views: Vec<Vec<f64>> = order
        .iter()
        .take(config.queue_size.min(dataset.len()))
        .map(|&i| augment(dataset.point(i), &mut rng, &aug))
        .collect();
    let blocks: Vec<Vec<Vec<f64>>> =
        views.par_iter().map(|x| forward_teacher(x, &teacher)).collect::<Result<_, _>>()?;
    for b in &blocks {
        queue.push(b)?;
    }

    Ok(TrainState {
        momentum: SgdState {
            student: student.zeros_like(),
            mu: DenseMatrix::zeros(config.n_clusters, config.embed_dim),
        },
        student,
        teacher,
        accumulator: PrototypeAccumulator::new(config.n_clusters, config.embed_dim),
        mu,
        omega,
        queue,
        epoch: 0,
        step: 0,
        rng,
    })
}

/// PyTorch-style SGD: `g += wd·p; buf = m·buf + g; p -= lr·buf`.
fn sgd(params: &mut [f64], grads: &[f64], buf: &mut [f64], lr: f64, momentum: f64, wd: f64) {
    for ((p, g), b) in params.iter_mut().zip(grads).zip(buf.iter_mut()) {
        let g = g + wd * *p;
        *b = momentum * *b + g;
        *p -= lr * *b;
    }
}

struct Forwards {
    student: Vec<TapedOutput>,
    gating: Vec<Option<TapedOutput>>,
    teacher: Vec<Vec<Vec<f64>>>,
}

fn forward_batch(
    state: &TrainState,
    student_in: &[Vec<f64>],
    gating_in: &[Vec<f64>],
    teacher_in: &[Vec<f64>],
    use_gating: bool,
) -> Result<Forwards, TrainError> {
    let out: Vec<(TapedOutput, Option<TapedOutput>, Vec<Vec<f64>>)> = (0..student_in.len())
        .into_par_iter()
        .map(|n| -> Result<_, EncoderError> {
            let f = forward_student(&student_in[n], &state.student)?;
            let g = if use_gating { Some(forward_gating(&gating_in[n], &state.student)?) } else { None };
            let v = forward_teacher(&teacher_in[n], &state.teacher)?;
            Ok((f, g, v))
        })
        .collect::<Result<_, _>>()?;
    let mut fw = Forwards { student: Vec::new(), gating: Vec::new(), teacher: Vec::new() };
    for (f, g, v) in out {
        fw.student.push(f);
        fw.gating.push(g);
        fw.teacher.push(v);
    }
    Ok(fw)
}

/// Backpropagate per-item embedding gradients into one parameter gradient.
fn backprop(
    params: &EncoderParams,
    fw: &Forwards,
    grad_f: &[Vec<Vec<f64>>],
    grad_g: &[Vec<f64>],
) -> Result<GradientBundle, TrainError> {
    let n = fw.student.len();
    let chunks: Vec<GradientBundle> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(GRAD_CHUNK)
        .map(|idx| -> Result<GradientBundle, EncoderError> {
            let mut acc = GradientBundle::zeros_for(params);
            for &i in idx {
                backward_into(params, &fw.student[i].tape, &grad_f[i], &mut acc)?;
                if let Some(g) = &fw.gating[i] {
                    backward_into(params, &g.tape, std::slice::from_ref(&grad_g[i]), &mut acc)?;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_, _>>()?;
    let mut total = GradientBundle::zeros_for(params);
    for c in &chunks {
        total.add_assign(c);
    }
    Ok(total)
}

fn items<'a>(fw: &'a Forwards, empty: &'a [f64]) -> Vec<ItemEmbeddings<'a>> {
    (0..fw.student.len())
        .map(|n| ItemEmbeddings {
            f: &fw.student[n].embeddings,
            v: &fw.teacher[n],
            g: fw.gating[n].as_ref().map_or(empty, |g| &g.embeddings[0]),
        })
        .collect()
}

/// Objective and parameter gradients for one batch of explicit views.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub output: ElboOutput,
    /// `∂loss/∂(student and gating parameters)`.
    pub student: GradientBundle,
    /// Teacher embeddings of the batch, one block per item.
    pub teacher_blocks: Vec<Vec<Vec<f64>>>,
}

/// Forward the given views, evaluate the batch objective against the current
/// queue and backpropagate. `gating_in` is ignored under uniform gating.
pub fn batch_gradients(
    state: &TrainState,
    config: &TrainConfig,
    student_in: &[Vec<f64>],
    teacher_in: &[Vec<f64>],
    gating_in: &[Vec<f64>],
) -> Result<BatchGradients, TrainError> {
    let flags = config.flags();
    let fw = forward_batch(state, student_in, gating_in, teacher_in, !flags.uniform_gating)?;
    let spec = config.model_spec();
    let mode = if config.detach_posterior { PosteriorMode::Detached } else { PosteriorMode::Joint };
    let output = elbo_batch(&items(&fw, &[]), &state.queue, &state.mu, &state.omega, &spec, mode)?;
    let student = backprop(&state.student, &fw, &output.grad_f, &output.grad_g)?;
    Ok(BatchGradients { output, student, teacher_blocks: fw.teacher })
}

/// One EM step on the datapoints `batch` (row indices).
pub fn train_step(
    state: &mut TrainState,
    config: &TrainConfig,
    dataset: &Dataset,
    batch: &[usize],
) -> Result<StepMetrics, TrainError> {
    let aug = config.augment();
    let flags = config.flags();
    let mut student_in = Vec::with_capacity(batch.len());
    let mut teacher_in = Vec::with_capacity(batch.len());
    let mut gating_in = Vec::with_capacity(batch.len());
    for &i in batch {
        let x = dataset.point(i);
        student_in.push(augment(x, &mut state.rng, &aug));
        teacher_in.push(augment(x, &mut state.rng, &aug));
        gating_in.push(augment(x, &mut state.rng, &aug));
    }
    let BatchGradients { output: out, student: grads, teacher_blocks } =
        batch_gradients(state, config, &student_in, &teacher_in, &gating_in)?;
    if !out.loss.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            epoch: state.epoch,
            step: state.step,
            detail: format!("loss = {}", out.loss),
        });
    }

    let lr = config.lr_at(state.epoch);
    for ((p, g), b) in
        state.student.slices_mut().into_iter().zip(grads.params().slices()).zip(state.momentum.student.slices_mut())
    {
        sgd(p, g, b, lr, config.sgd_momentum, config.weight_decay);
    }
    sgd(
        state.mu.mu.as_mut_slice(),
        out.grad_mu.as_slice(),
        state.momentum.mu.as_mut_slice(),
        lr,
        config.sgd_momentum,
        config.weight_decay,
    );
    if !state.student.is_finite() || state.mu.mu.as_slice().iter().any(|x| !x.is_finite()) {
        return Err(TrainError::NonFiniteLoss {
            epoch: state.epoch,
            step: state.step,
            detail: "parameters became non-finite".into(),
        });
    }

    ema_update(&mut state.teacher, &state.student, config.ema_momentum)?;
    let labels = hard_assign(&out.posterior);
    for (n, block) in teacher_blocks.iter().enumerate() {
        state.queue.push(block)?;
        let k = labels[n];
        let h = if flags.single_head { 0 } else { k };
        state.accumulator.accumulate(&block[h], k)?;
    }
    state.step += 1;

    Ok(StepMetrics { loss: out.loss, elbo: out.elbo, posterior_entropy: out.posterior.mean_entropy() })
}

/// Analytical prototype update from the epoch's hard assignments. Returns the
/// occupancy histogram that fed it.
pub fn end_of_epoch(state: &mut TrainState) -> Vec<u64> {
    state.mu = analytical_update(&state.accumulator, &state.mu);
    let occupancy = state.accumulator.counts.clone();
    state.accumulator.reset();
    state.epoch += 1;
    occupancy
}

/// One pass over the dataset in a freshly shuffled order.
pub fn run_epoch(state: &mut TrainState, config: &TrainConfig, dataset: &Dataset) -> Result<EpochMetrics, TrainError> {
    let lr = config.lr_at(state.epoch);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut state.rng);
    let (mut loss, mut elbo, mut ent, mut seen) = (0.0, 0.0, 0.0, 0usize);
    for batch in order.chunks(config.batch_size) {
        let m = train_step(state, config, dataset, batch)?;
        let w = batch.len() as f64;
        loss += m.loss * w;
        elbo += m.elbo * w;
        ent += m.posterior_entropy * w;
        seen += batch.len();
    }
    let epoch = state.epoch;
    let occupancy = end_of_epoch(state);
    let n = seen as f64;
    let mut metrics = EpochMetrics {
        epoch,
        lr,
        loss: loss / n,
        elbo: elbo / n,
        posterior_entropy: ent / n,
        occupancy,
        nmi: None,
        acc: None,
        ari: None,
    };
    if let Some(truth) = dataset.truth() {
        let eval = evaluate(state, config, dataset)?;
        metrics.nmi = metrics::nmi(truth, &eval.labels).ok();
        metrics.acc = metrics::acc(truth, &eval.labels).ok();
        metrics.ari = metrics::ari(truth, &eval.labels).ok();
    }
    Ok(metrics)
}

/// Continue training until `config.epochs`, calling `on_epoch` after each one.
pub fn fit_from(
    state: &mut TrainState,
    config: &TrainConfig,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&TrainState, &EpochMetrics) -> Result<(), TrainError>,
) -> Result<Vec<EpochMetrics>, TrainError> {
    check_dataset(config, dataset)?;
    let mut log = Vec::new();
    while state.epoch < config.epochs {
        let m = run_epoch(state, config, dataset)?;
        log::info!(
            "epoch {} lr {:.3e} loss {:.5} entropy {:.4} acc {:?}",
            m.epoch,
            m.lr,
            m.loss,
            m.posterior_entropy,
            m.acc
        );
        on_epoch(state, &m)?;
        log.push(m);
    }
    Ok(log)
}

pub fn fit(config: &TrainConfig, dataset: &Dataset) -> Result<(TrainState, Vec<EpochMetrics>), TrainError> {
    let mut state = init_state(config, dataset)?;
    let log = fit_from(&mut state, config, dataset, |_, _| Ok(()))?;
    Ok((state, log))
}

/// Teacher embeddings of every point, without augmentation.
pub fn teacher_embeddings(state: &TrainState, dataset: &Dataset) -> Result<Vec<Vec<Vec<f64>>>, TrainError> {
    Ok((0..dataset.len())
        .into_par_iter()
        .map(|i| forward_teacher(dataset.point(i), &state.teacher))
        .collect::<Result<_, _>>()?)
}

/// Deterministic posterior and hard labels for every point.
pub fn evaluate(state: &TrainState, config: &TrainConfig, dataset: &Dataset) -> Result<Evaluation, TrainError> {
    let spec = config.model_spec();
    let flags = spec.flags;
    let rows: Vec<Vec<f64>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<f64>, TrainError> {
            let x = dataset.point(i);
            let f = forward_student(x, &state.student)?.embeddings;
            let v = forward_teacher(x, &state.teacher)?;
            let gate = if flags.uniform_gating {
                vec![1.0 / config.n_clusters as f64; config.n_clusters]
            } else {
                let g = forward_gating(x, &state.student)?.embeddings;
                gating_dist(&g[0], &state.omega, spec.temps.kappa, &flags)?
            };
            let lp = log_phi(&v, &f, &state.mu, spec.temps.tau, &flags)?;
            let lz = log_zhat(&f, &v, &state.queue, &state.mu, spec.temps.tau, &flags, spec.zhat)?;
            Ok(posterior(&gate, &lp, &lz)?)
        })
        .collect::<Result<_, _>>()?;
    let posterior = PosteriorMatrix::from_rows(&rows)?;
    Ok(Evaluation { labels: hard_assign(&posterior), posterior })
}

/// Exact ELBO values around one classical EM iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EmRecord {
    /// With the previous posterior, before the E-step.
    pub before_e: f64,
    /// After the E-step (posterior set to the exact Bayes posterior).
    pub after_e: f64,
    /// After the gradient M-step, posterior held fixed.
    pub after_m: f64,
}

/// Classical EM with the exact normalizer: the teacher is frozen and its
/// embeddings of all `N` points form the candidate set, each E-step sets `q`
/// to the exact posterior and each M-step is one full-batch gradient-ascent
/// step (no momentum, no weight decay) on the ELBO with `q` held fixed.
pub fn full_batch_em(
    state: &mut TrainState,
    config: &TrainConfig,
    dataset: &Dataset,
    steps: usize,
    lr: f64,
) -> Result<Vec<EmRecord>, TrainError> {
    check_dataset(config, dataset)?;
    let flags = config.flags();
    let temps = config.temperatures();
    let spec = ModelSpec { temps, flags, zhat: ZhatMode::QueueOnly };
    let xs: Vec<Vec<f64>> = (0..dataset.len()).map(|i| dataset.point(i).to_vec()).collect();
    let v = teacher_embeddings(state, dataset)?;
    let queue = EmbeddingQueue::from_blocks(&v)?;
    let k = config.n_clusters;

    let exact = |state: &TrainState, q: Option<&PosteriorMatrix>| -> Result<(f64, PosteriorMatrix), TrainError> {
        let fw = forward_batch(state, &xs, &xs, &xs, !flags.uniform_gating)?;
        let f: Vec<Vec<Vec<f64>>> = fw.student.iter().map(|t| t.embeddings.clone()).collect();
        let g: Vec<Vec<f64>> =
            fw.gating.iter().map(|t| t.as_ref().map_or(Vec::new(), |t| t.embeddings[0].clone())).collect();
        let model = ExactModel { f: &f, g: &g, v: &v, mu: &state.mu, omega: &state.omega, temps, flags };
        let post = model.posterior()?;
        let value = model.elbo(q.unwrap_or(&post))?;
        Ok((value, post))
    };

    let mut q = PosteriorMatrix::from_rows(&vec![vec![1.0 / k as f64; k]; dataset.len()])?;
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (before_e, post) = exact(state, Some(&q))?;
        q = post;
        let after_e = exact(state, Some(&q))?.0;

        let fw = forward_batch(state, &xs, &xs, &xs, !flags.uniform_gating)?;
        let item_fw = Forwards { student: fw.student, gating: fw.gating, teacher: v.clone() };
        let out = elbo_batch(&items(&item_fw, &[]), &queue, &state.mu, &state.omega, &spec, PosteriorMode::Fixed(&q))?;
        let grads = backprop(&state.student, &item_fw, &out.grad_f, &out.grad_g)?;
        for (p, g) in state.student.slices_mut().into_iter().zip(grads.params().slices()) {
            p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
        }
        state.mu.mu.as_mut_slice().iter_mut().zip(out.grad_mu.as_slice()).for_each(|(p, g)| *p -= lr * g);

        let after_m = exact(state, Some(&q))?.0;
        records.push(EmRecord { before_e, after_e, after_m });
    }
    Ok(records)
}

//! Self-checks runnable from the command line: prototype geometry, gradient
//! fidelity, the special-case equivalences and the normalizer bound.

use crate::baselines::{infonce_loss, kmeans_step_check, kmeans_step_compare, random_unit};
use crate::data::{generate, SyntheticSpec};
use crate::encoder::augment;
use crate::model::{
    elbo_batch, log_zhat, EmbeddingQueue, ItemEmbeddings, ModelFlags, ModelSpec, PosteriorMode, Temperatures, ZhatMode,
};
use crate::numcore::{dot_unchecked, norm, SeededRng};
use crate::prototypes::{mmd_centers, ExpertPrototypes};
use crate::trainer::{batch_gradients, full_batch_em, init_state, TrainConfig, TrainState};
use rand::Rng;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Mmd,
    Gradients,
    Theorems,
    Bound,
    All,
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mmd" => Ok(Self::Mmd),
            "gradients" => Ok(Self::Gradients),
            "theorems" => Ok(Self::Theorems),
            "bound" => Ok(Self::Bound),
            "all" => Ok(Self::All),
            other => Err(format!("unknown suite `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn outcome(name: &'static str, result: Result<(bool, String), String>) -> CheckOutcome {
    match result {
        Ok((passed, detail)) => CheckOutcome { name, passed, detail },
        Err(e) => CheckOutcome { name, passed: false, detail: format!("error: {e}") },
    }
}

pub fn run(suite: Suite) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Mmd | Suite::All) {
        out.push(outcome("mmd-dispersion", mmd_dispersion()));
    }
    if matches!(suite, Suite::Gradients | Suite::All) {
        out.push(outcome("gradient-fidelity", gradient_fidelity()));
    }
    if matches!(suite, Suite::Theorems | Suite::All) {
        out.push(outcome("infonce-reduction", infonce_reduction(100)));
        out.push(outcome("uniform-posterior", uniform_posterior(100)));
        out.push(outcome("kmeans-equivalence", kmeans_equivalence(100)));
        out.push(outcome("exact-posterior", exact_posterior()));
        out.push(outcome("classical-em-monotone", classical_em(200, 200)));
    }
    if matches!(suite, Suite::Bound | Suite::All) {
        out.push(outcome("normalizer-bound", normalizer_bound(1000)));
    }
    out
}

fn mmd_dispersion() -> Result<(bool, String), String> {
    let (mut norm_err, mut dot_err): (f64, f64) = (0.0, 0.0);
    let mut cases = 0;
    for d in [2usize, 8, 16, 128] {
        for k in 2..=(d + 1).min(64) {
            let g = mmd_centers(k, d).map_err(|e| e.to_string())?;
            let target = -1.0 / (k as f64 - 1.0);
            for i in 0..k {
                norm_err = norm_err.max((norm(g.row(i)) - 1.0).abs());
                for j in 0..i {
                    dot_err = dot_err.max((dot_unchecked(g.row(i), g.row(j)) - target).abs());
                }
            }
            cases += 1;
        }
    }
    Ok((
        norm_err <= 1e-12 && dot_err <= 1e-9,
        format!("{cases} (K, d) pairs, max |‖ω‖−1| = {norm_err:.2e}, max dot error = {dot_err:.2e}"),
    ))
}

/// The tiny instance used for gradient checks.
pub fn gradient_instance() -> (TrainState, TrainConfig, [Vec<Vec<f64>>; 3]) {
    let ds = generate(&SyntheticSpec { n_clusters: 3, d_input: 8, n_per_cluster: 6, concentration: 5.0, seed: 17 })
        .expect("valid spec");
    let cfg = TrainConfig {
        n_clusters: 3,
        hidden: vec![16],
        embed_dim: 4,
        queue_size: 8,
        batch_size: 4,
        tau: 0.5,
        kappa: 0.8,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut state = init_state(&cfg, &ds).expect("valid config");
    // move the prototypes off the unit sphere so their normalization matters
    for x in state.mu.mu.as_mut_slice() {
        *x *= 1.3;
    }
    let aug = cfg.augment();
    let mut rng = SeededRng::new(99);
    let mut views = [Vec::new(), Vec::new(), Vec::new()];
    for i in 0..cfg.batch_size {
        for v in views.iter_mut() {
            v.push(augment(ds.point(i), &mut rng, &aug));
        }
    }
    (state, cfg, views)
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Max relative error between analytic and central-difference gradients
/// (`h = 1e-5`) over every student, gating and prototype parameter.
pub fn gradient_max_relative_error(
    state: &TrainState,
    config: &TrainConfig,
    views: &[Vec<Vec<f64>>; 3],
) -> Result<(f64, usize), String> {
    let loss = |s: &TrainState| -> Result<f64, String> {
        batch_gradients(s, config, &views[0], &views[1], &views[2]).map(|g| g.output.loss).map_err(|e| e.to_string())
    };
    let g = batch_gradients(state, config, &views[0], &views[1], &views[2]).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut probe = state.clone();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let analytic: Vec<Vec<f64>> = g.student.params().slices().iter().map(|s| s.to_vec()).collect();
    for (si, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe.student.slices()[si][j];
            probe.student.slices_mut()[si][j] = orig + h;
            let up = loss(&probe)?;
            probe.student.slices_mut()[si][j] = orig - h;
            let down = loss(&probe)?;
            probe.student.slices_mut()[si][j] = orig;
            worst = worst.max(relative_error(a, (up - down) / (2.0 * h)));
            count += 1;
        }
    }
    for (j, &a) in g.output.grad_mu.as_slice().iter().enumerate() {
        let orig = probe.mu.mu.as_slice()[j];
        probe.mu.mu.as_mut_slice()[j] = orig + h;
        let up = loss(&probe)?;
        probe.mu.mu.as_mut_slice()[j] = orig - h;
        let down = loss(&probe)?;
        probe.mu.mu.as_mut_slice()[j] = orig;
        worst = worst.max(relative_error(a, (up - down) / (2.0 * h)));
        count += 1;
    }
    Ok((worst, count))
}

fn gradient_fidelity() -> Result<(bool, String), String> {
    let (state, cfg, views) = gradient_instance();
    let (worst, count) = gradient_max_relative_error(&state, &cfg, &views)?;
    Ok((worst < 1e-4, format!("{count} parameters, max relative error {worst:.2e}")))
}

struct Random {
    f: Vec<Vec<Vec<f64>>>,
    v: Vec<Vec<Vec<f64>>>,
    g: Vec<Vec<f64>>,
    queue: EmbeddingQueue,
    mu: ExpertPrototypes,
}

fn random_batch(rng: &mut SeededRng, b: usize, k: usize, d: usize, nu: usize, flags: &ModelFlags) -> Random {
    let heads = flags.heads(k);
    let block = |rng: &mut SeededRng| -> Vec<Vec<f64>> { (0..heads).map(|_| random_unit(rng, d)).collect() };
    let f = (0..b).map(|_| block(rng)).collect();
    let v = (0..b).map(|_| block(rng)).collect();
    let g = (0..b).map(|_| random_unit(rng, d)).collect();
    let blocks: Vec<_> = (0..nu).map(|_| block(rng)).collect();
    Random {
        f,
        v,
        g,
        queue: EmbeddingQueue::from_blocks(&blocks).expect("uniform blocks"),
        mu: ExpertPrototypes::random(k, d, rng),
    }
}

fn infonce_reduction(trials: usize) -> Result<(bool, String), String> {
    let mut rng = SeededRng::new(31);
    let flags = ModelFlags::moco();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let k = rng.random_range(2..=6);
        let d = rng.random_range(k.max(3)..=10);
        let b = rng.random_range(1..=6);
        let nu = rng.random_range(1..=20);
        let tau = rng.random_range(0.1..2.0);
        let r = random_batch(&mut rng, b, k, d, nu, &flags);
        let omega = mmd_centers(k, d).map_err(|e| e.to_string())?;
        let items: Vec<_> = (0..b).map(|n| ItemEmbeddings { f: &r.f[n], v: &r.v[n], g: &r.g[n] }).collect();
        let spec = ModelSpec { temps: Temperatures { tau, kappa: 1.0 }, flags, zhat: ZhatMode::WithPositive };
        let out =
            elbo_batch(&items, &r.queue, &r.mu, &omega, &spec, PosteriorMode::Joint).map_err(|e| e.to_string())?;
        let negs: Vec<&[f64]> = r.queue.head_rows(0).collect();
        let mut mean = 0.0;
        for n in 0..b {
            mean += infonce_loss(&r.f[n][0], &r.v[n][0], &negs, tau).map_err(|e| e.to_string())?;
        }
        mean /= b as f64;
        worst = worst.max((out.loss - mean).abs());
    }
    Ok((worst <= 1e-10, format!("{trials} instances, max |−ELBO − InfoNCE| = {worst:.2e}")))
}

fn uniform_posterior(trials: usize) -> Result<(bool, String), String> {
    let mut rng = SeededRng::new(37);
    let flags = ModelFlags::moco();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let k = rng.random_range(2..=8);
        let d = rng.random_range((k - 1).max(2)..=12);
        let r = random_batch(&mut rng, 4, k, d, 10, &flags);
        let omega = mmd_centers(k, d).map_err(|e| e.to_string())?;
        let items: Vec<_> = (0..4).map(|n| ItemEmbeddings { f: &r.f[n], v: &r.v[n], g: &r.g[n] }).collect();
        let spec = ModelSpec { flags, ..Default::default() };
        let out =
            elbo_batch(&items, &r.queue, &r.mu, &omega, &spec, PosteriorMode::Joint).map_err(|e| e.to_string())?;
        for n in 0..4 {
            for &p in out.posterior.row(n) {
                worst = worst.max((p - 1.0 / k as f64).abs());
            }
        }
    }
    Ok((worst <= 1e-12, format!("{trials} instances, max |q − 1/K| = {worst:.2e}")))
}

fn kmeans_equivalence(trials: usize) -> Result<(bool, String), String> {
    let mut rng = SeededRng::new(41);
    let mut failures = 0;
    for _ in 0..trials {
        let n = rng.random_range(8..=128);
        let k = rng.random_range(2..=6);
        let d = rng.random_range(2..=12);
        let v: Vec<Vec<f64>> = (0..n).map(|_| random_unit(&mut rng, d)).collect();
        let mu = ExpertPrototypes::random(k, d, &mut rng);
        let tau = rng.random_range(0.2..2.0);
        if !kmeans_step_compare(&v, &mu, &mu, tau).map_err(|e| e.to_string())?.equivalent {
            failures += 1;
        }
    }
    // the same comparison driven from a model state's teacher embeddings
    let ds = generate(&SyntheticSpec { n_clusters: 3, d_input: 8, n_per_cluster: 20, concentration: 10.0, seed: 2 })
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        n_clusters: 3,
        hidden: vec![8],
        embed_dim: 6,
        queue_size: 16,
        uniform_gating: true,
        single_head: true,
        ..TrainConfig::default()
    };
    let state = init_state(&cfg, &ds).map_err(|e| e.to_string())?;
    let from_state = kmeans_step_check(&state, &cfg, &ds).map_err(|e| e.to_string())?.equivalent;
    Ok((
        failures == 0 && from_state,
        format!(
            "{trials} random states, {failures} mismatches; model-state check {}",
            if from_state { "agrees" } else { "disagrees" }
        ),
    ))
}

fn exact_posterior() -> Result<(bool, String), String> {
    let mut rng = SeededRng::new(43);
    let (n, k, d) = (300, 4, 6);
    let flags = ModelFlags::default();
    let r = random_batch(&mut rng, n, k, d, 1, &flags);
    let queue = EmbeddingQueue::from_blocks(&r.v).map_err(|e| e.to_string())?;
    let omega = mmd_centers(k, d).map_err(|e| e.to_string())?;
    let spec = ModelSpec { zhat: ZhatMode::QueueOnly, ..Default::default() };
    let items: Vec<_> = (0..n).map(|i| ItemEmbeddings { f: &r.f[i], v: &r.v[i], g: &r.g[i] }).collect();
    let out = elbo_batch(&items, &queue, &r.mu, &omega, &spec, PosteriorMode::Joint).map_err(|e| e.to_string())?;
    let mub = r.mu.normalized();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let gate: Vec<f64> = (0..k).map(|j| dot_unchecked(omega.row(j), &r.g[i]).exp()).collect();
        let joint: Vec<f64> = (0..k)
            .map(|j| {
                let s: Vec<f64> = r.f[i][j].iter().zip(mub.row(j)).map(|(a, b)| a + b).collect();
                let phi = |m: usize| dot_unchecked(&r.v[m][j], &s).exp();
                let z: f64 = (0..n).map(phi).sum();
                gate[j] * phi(i) / z
            })
            .collect();
        let total: f64 = joint.iter().sum();
        for j in 0..k {
            worst = worst.max((out.posterior.row(i)[j] - joint[j] / total).abs());
        }
    }
    Ok((worst <= 1e-10, format!("N = {n}, max |q − q_bayes| = {worst:.2e}")))
}

fn classical_em(n_points: usize, steps: usize) -> Result<(bool, String), String> {
    let per = n_points / 4;
    let ds = generate(&SyntheticSpec { n_clusters: 4, d_input: 8, n_per_cluster: per, concentration: 10.0, seed: 8 })
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        n_clusters: 4,
        hidden: vec![16],
        embed_dim: 6,
        queue_size: 16,
        detach_posterior: true,
        ..TrainConfig::default()
    };
    let mut state = init_state(&cfg, &ds).map_err(|e| e.to_string())?;
    let rec = full_batch_em(&mut state, &cfg, &ds, steps, 1e-3).map_err(|e| e.to_string())?;
    let worst_m = rec.iter().map(|r| r.after_e - r.after_m).fold(f64::NEG_INFINITY, f64::max);
    let worst_e = rec.iter().map(|r| r.before_e - r.after_e).fold(f64::NEG_INFINITY, f64::max);
    let gain = rec.last().map_or(0.0, |r| r.after_m) - rec.first().map_or(0.0, |r| r.before_e);
    Ok((
        worst_m <= 1e-6 && worst_e <= 1e-10,
        format!("{steps} steps on N = {}; worst M-step drop {worst_m:.2e}, worst E-step drop {worst_e:.2e}, total gain {gain:.4}", ds.len()),
    ))
}

fn normalizer_bound(trials: usize) -> Result<(bool, String), String> {
    let mut rng = SeededRng::new(47);
    let flags = ModelFlags::default();
    let mut worst_slack = f64::INFINITY;
    for _ in 0..trials {
        let n = rng.random_range(2..=60);
        let nu = rng.random_range(1..=n);
        let k = 3;
        let d = rng.random_range(2..=8);
        let tau = rng.random_range(0.1..2.0);
        let r = random_batch(&mut rng, n, k, d, 1, &flags);
        let full = EmbeddingQueue::from_blocks(&r.v).map_err(|e| e.to_string())?;
        let partial = EmbeddingQueue::from_blocks(&r.v[n - nu..]).map_err(|e| e.to_string())?;
        let bound = (n as f64).ln() - (nu as f64).ln() + 4.0 / tau;
        let i = rng.random_range(0..n);
        let lz =
            log_zhat(&r.f[i], &r.v[i], &full, &r.mu, tau, &flags, ZhatMode::QueueOnly).map_err(|e| e.to_string())?;
        for mode in [ZhatMode::WithPositive, ZhatMode::QueueOnly] {
            let lzh = log_zhat(&r.f[i], &r.v[i], &partial, &r.mu, tau, &flags, mode).map_err(|e| e.to_string())?;
            for j in 0..k {
                worst_slack = worst_slack.min(bound - (lz[j] - lzh[j]));
            }
        }
    }
    Ok((worst_slack >= 0.0, format!("{trials} states, both estimator forms, min slack {worst_slack:.3}")))
}

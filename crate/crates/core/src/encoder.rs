//! Feed-forward encoders for the student, teacher and gating networks.
//!
//! The student and gating networks share a tanh trunk and differ only in their
//! output layers: one affine head per expert for the student, one gating head.
//! Every head output is projected onto the unit sphere. The teacher mirrors the
//! student's trunk and expert heads and only ever moves by EMA.
//!
//! Gradients are computed by hand: each forward call that needs them returns a
//! [`Tape`] holding the activations, and [`backward`] replays it in reverse.

use crate::numcore::{dot_unchecked, l2_normalize, DenseMatrix, NumError, SeededRng};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("input has dimension {got}, encoder expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("tape does not match this backward call: {0}")]
    TapeMismatch(String),
    #[error("EMA momentum must lie in [0, 1), got {0}")]
    InvalidMomentum(f64),
    #[error("parameter shapes differ: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// Architecture of an encoder family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderShape {
    pub input_dim: usize,
    /// Output width of each trunk layer; empty means heads read the input directly.
    pub trunk_widths: Vec<usize>,
    pub embed_dim: usize,
    pub expert_heads: usize,
}

impl EncoderShape {
    pub fn trunk_out(&self) -> usize {
        self.trunk_widths.last().copied().unwrap_or(self.input_dim)
    }
}

/// `y = W x + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Affine {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: DenseMatrix::zeros(output, input), bias: vec![0.0; output] }
    }

    /// Uniform in `[-1/√fan_in, 1/√fan_in]` for weights and biases.
    pub fn init(input: usize, output: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let mut layer = Self::zeros(input, output);
        for w in layer.weight.as_mut_slice() {
            *w = rng.random_range(-bound..=bound);
        }
        for b in &mut layer.bias {
            *b = rng.random_range(-bound..=bound);
        }
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight.iter_rows().zip(&self.bias).map(|(row, b)| dot_unchecked(row, x) + b).collect()
    }

    /// Accumulate parameter gradients for upstream `grad_out` at input `x` into
    /// `acc` and return the gradient with respect to `x`.
    fn backward(&self, x: &[f64], grad_out: &[f64], acc: &mut Affine) -> Vec<f64> {
        let mut grad_in = vec![0.0; self.input_dim()];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            acc.bias[o] += g;
            let acc_row = acc.weight.row_mut(o);
            for (a, xi) in acc_row.iter_mut().zip(x) {
                *a += g * xi;
            }
            for (gi, w) in grad_in.iter_mut().zip(self.weight.row(o)) {
                *gi += g * w;
            }
        }
        grad_in
    }

    fn same_shape(&self, other: &Affine) -> bool {
        self.input_dim() == other.input_dim() && self.output_dim() == other.output_dim()
    }
}

/// Student and gating parameters. The trunk is shared; `expert_heads` and the
/// trunk form the student, `gating_head` and the trunk form the gating network.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub trunk: Vec<Affine>,
    pub expert_heads: Vec<Affine>,
    pub gating_head: Affine,
}

/// EMA copy of the student's trunk and expert heads.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherParams {
    pub trunk: Vec<Affine>,
    pub expert_heads: Vec<Affine>,
}

/// Parameter gradients, shape-congruent with [`EncoderParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle(pub EncoderParams);

impl EncoderParams {
    pub fn init(shape: &EncoderShape, rng: &mut SeededRng) -> Self {
        let mut trunk = Vec::with_capacity(shape.trunk_widths.len());
        let mut width = shape.input_dim;
        for &w in &shape.trunk_widths {
            trunk.push(Affine::init(width, w, rng));
            width = w;
        }
        let expert_heads = (0..shape.expert_heads).map(|_| Affine::init(width, shape.embed_dim, rng)).collect();
        let gating_head = Affine::init(width, shape.embed_dim, rng);
        Self { trunk, expert_heads, gating_head }
    }

    pub fn zeros(shape: &EncoderShape) -> Self {
        let mut trunk = Vec::with_capacity(shape.trunk_widths.len());
        let mut width = shape.input_dim;
        for &w in &shape.trunk_widths {
            trunk.push(Affine::zeros(width, w));
            width = w;
        }
        Self {
            trunk,
            expert_heads: (0..shape.expert_heads).map(|_| Affine::zeros(width, shape.embed_dim)).collect(),
            gating_head: Affine::zeros(width, shape.embed_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |a: &Affine| Affine::zeros(a.input_dim(), a.output_dim());
        Self {
            trunk: self.trunk.iter().map(z).collect(),
            expert_heads: self.expert_heads.iter().map(z).collect(),
            gating_head: z(&self.gating_head),
        }
    }

    pub fn shape(&self) -> EncoderShape {
        let input_dim = self.trunk.first().map_or_else(|| self.gating_head.input_dim(), Affine::input_dim);
        EncoderShape {
            input_dim,
            trunk_widths: self.trunk.iter().map(Affine::output_dim).collect(),
            embed_dim: self.gating_head.output_dim(),
            expert_heads: self.expert_heads.len(),
        }
    }

    pub fn teacher_copy(&self) -> TeacherParams {
        TeacherParams { trunk: self.trunk.clone(), expert_heads: self.expert_heads.clone() }
    }

    /// Every parameter array in a fixed order: trunk, expert heads, gating head;
    /// weights before biases.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for a in self.trunk.iter().chain(&self.expert_heads).chain(std::iter::once(&self.gating_head)) {
            out.push(a.weight.as_slice());
            out.push(a.bias.as_slice());
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for a in self.trunk.iter_mut().chain(self.expert_heads.iter_mut()).chain(std::iter::once(&mut self.gating_head))
        {
            out.push(a.weight.as_mut_slice());
            out.push(a.bias.as_mut_slice());
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl TeacherParams {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for a in self.trunk.iter().chain(&self.expert_heads) {
            out.push(a.weight.as_slice());
            out.push(a.bias.as_slice());
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for a in self.trunk.iter_mut().chain(self.expert_heads.iter_mut()) {
            out.push(a.weight.as_mut_slice());
            out.push(a.bias.as_mut_slice());
        }
        out
    }

    fn congruent_with(&self, student: &EncoderParams) -> bool {
        self.trunk.len() == student.trunk.len()
            && self.expert_heads.len() == student.expert_heads.len()
            && self.trunk.iter().zip(&student.trunk).all(|(a, b)| a.same_shape(b))
            && self.expert_heads.iter().zip(&student.expert_heads).all(|(a, b)| a.same_shape(b))
    }
}

impl GradientBundle {
    pub fn zeros_for(params: &EncoderParams) -> Self {
        Self(params.zeros_like())
    }

    pub fn params(&self) -> &EncoderParams {
        &self.0
    }

    pub fn add_assign(&mut self, other: &GradientBundle) {
        for (a, b) in self.0.slices_mut().into_iter().zip(other.0.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.0.slices_mut() {
            for x in s {
                *x *= factor;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.0.slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapeKind {
    Experts,
    Gating,
}

/// Saved activations from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    kind: TapeKind,
    input: Vec<f64>,
    /// Post-tanh output of each trunk layer.
    trunk_out: Vec<Vec<f64>>,
    /// Head outputs before normalization.
    raw: Vec<Vec<f64>>,
    /// Normalized head outputs.
    unit: Vec<Vec<f64>>,
    shape: EncoderShape,
}

impl Tape {
    pub fn kind(&self) -> TapeKind {
        self.kind
    }
}

/// Embeddings plus the tape needed to differentiate them.
#[derive(Debug, Clone)]
pub struct TapedOutput {
    pub embeddings: Vec<Vec<f64>>,
    pub tape: Tape,
}

fn run_trunk(trunk: &[Affine], x: &[f64], input_dim: usize) -> Result<Vec<Vec<f64>>, EncoderError> {
    if x.len() != input_dim {
        return Err(EncoderError::DimensionMismatch { expected: input_dim, got: x.len() });
    }
    let mut outs: Vec<Vec<f64>> = Vec::with_capacity(trunk.len());
    for layer in trunk {
        let prev = outs.last().map_or(x, Vec::as_slice);
        let mut h = layer.apply(prev);
        h.iter_mut().for_each(|v| *v = v.tanh());
        outs.push(h);
    }
    Ok(outs)
}

fn trunk_input_dim(trunk: &[Affine], heads: &[Affine]) -> usize {
    trunk.first().or(heads.first()).map_or(0, Affine::input_dim)
}

fn run_heads<'a>(
    heads: impl Iterator<Item = &'a Affine>,
    h: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), EncoderError> {
    let mut raw = Vec::new();
    let mut unit = Vec::new();
    for head in heads {
        let u = head.apply(h);
        unit.push(l2_normalize(&u)?.into_inner());
        raw.push(u);
    }
    Ok((raw, unit))
}

/// Student forward: one unit embedding per expert head.
pub fn forward_student(x: &[f64], params: &EncoderParams) -> Result<TapedOutput, EncoderError> {
    let shape = params.shape();
    let trunk_out = run_trunk(&params.trunk, x, shape.input_dim)?;
    let h = trunk_out.last().map_or(x, Vec::as_slice);
    let (raw, unit) = run_heads(params.expert_heads.iter(), h)?;
    Ok(TapedOutput {
        embeddings: unit.clone(),
        tape: Tape { kind: TapeKind::Experts, input: x.to_vec(), trunk_out, raw, unit, shape },
    })
}

/// Gating forward: a single unit embedding from the gating head.
pub fn forward_gating(x: &[f64], params: &EncoderParams) -> Result<TapedOutput, EncoderError> {
    let shape = params.shape();
    let trunk_out = run_trunk(&params.trunk, x, shape.input_dim)?;
    let h = trunk_out.last().map_or(x, Vec::as_slice);
    let (raw, unit) = run_heads(std::iter::once(&params.gating_head), h)?;
    Ok(TapedOutput {
        embeddings: unit.clone(),
        tape: Tape { kind: TapeKind::Gating, input: x.to_vec(), trunk_out, raw, unit, shape },
    })
}

/// Teacher forward, no tape.
pub fn forward_teacher(x: &[f64], params: &TeacherParams) -> Result<Vec<Vec<f64>>, EncoderError> {
    let input_dim = trunk_input_dim(&params.trunk, &params.expert_heads);
    let trunk_out = run_trunk(&params.trunk, x, input_dim)?;
    let h = trunk_out.last().map_or(x, Vec::as_slice);
    Ok(run_heads(params.expert_heads.iter(), h)?.1)
}

/// Reverse-mode gradients of a scalar loss given `upstream[i] = ∂L/∂embedding[i]`.
pub fn backward(params: &EncoderParams, tape: &Tape, upstream: &[Vec<f64>]) -> Result<GradientBundle, EncoderError> {
    let mut acc = GradientBundle::zeros_for(params);
    backward_into(params, tape, upstream, &mut acc)?;
    Ok(acc)
}

/// As [`backward`], accumulating into an existing bundle.
pub fn backward_into(
    params: &EncoderParams,
    tape: &Tape,
    upstream: &[Vec<f64>],
    acc: &mut GradientBundle,
) -> Result<(), EncoderError> {
    if tape.shape != params.shape() {
        return Err(EncoderError::TapeMismatch("tape was recorded with a different architecture".into()));
    }
    if upstream.len() != tape.unit.len() {
        return Err(EncoderError::TapeMismatch(format!(
            "{} upstream gradients for {} embeddings",
            upstream.len(),
            tape.unit.len()
        )));
    }
    if let Some(bad) = upstream.iter().find(|g| g.len() != tape.shape.embed_dim) {
        return Err(EncoderError::TapeMismatch(format!(
            "upstream gradient of length {} for embedding dimension {}",
            bad.len(),
            tape.shape.embed_dim
        )));
    }

    let h = tape.trunk_out.last().unwrap_or(&tape.input);
    let mut grad_h = vec![0.0; h.len()];
    for (i, g) in upstream.iter().enumerate() {
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        // d(u/|u|)/du = (I - y yᵀ)/|u|
        let y = &tape.unit[i];
        let n = crate::numcore::norm(&tape.raw[i]);
        let proj = dot_unchecked(y, g);
        let grad_raw: Vec<f64> = g.iter().zip(y).map(|(gi, yi)| (gi - yi * proj) / n).collect();
        let (head, head_acc) = match tape.kind {
            TapeKind::Experts => (&params.expert_heads[i], &mut acc.0.expert_heads[i]),
            TapeKind::Gating => (&params.gating_head, &mut acc.0.gating_head),
        };
        let gh = head.backward(h, &grad_raw, head_acc);
        grad_h.iter_mut().zip(gh).for_each(|(a, b)| *a += b);
    }

    for l in (0..params.trunk.len()).rev() {
        let out = &tape.trunk_out[l];
        let grad_pre: Vec<f64> = grad_h.iter().zip(out).map(|(g, a)| g * (1.0 - a * a)).collect();
        let input = if l == 0 { &tape.input } else { &tape.trunk_out[l - 1] };
        grad_h = params.trunk[l].backward(input, &grad_pre, &mut acc.0.trunk[l]);
    }
    Ok(())
}

/// `teacher ← m·teacher + (1−m)·student` over the trunk and expert heads.
pub fn ema_update(teacher: &mut TeacherParams, student: &EncoderParams, m: f64) -> Result<(), EncoderError> {
    if !(0.0..1.0).contains(&m) {
        return Err(EncoderError::InvalidMomentum(m));
    }
    if !teacher.congruent_with(student) {
        return Err(EncoderError::ShapeMismatch("teacher and student architectures differ".into()));
    }
    let src: Vec<&[f64]> = student
        .trunk
        .iter()
        .chain(&student.expert_heads)
        .flat_map(|a| [a.weight.as_slice(), a.bias.as_slice()])
        .collect();
    for (dst, src) in teacher.slices_mut().into_iter().zip(src) {
        for (t, s) in dst.iter_mut().zip(src) {
            *t = m * *t + (1.0 - m) * s;
        }
    }
    Ok(())
}

/// Stochastic view of a feature vector: additive Gaussian noise followed by
/// coordinate dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub noise_std: f64,
    pub dropout: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { noise_std: 0.1, dropout: 0.1 }
    }
}

pub fn augment(x: &[f64], rng: &mut SeededRng, cfg: &AugmentConfig) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let mut out = v;
            if cfg.noise_std > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                out += cfg.noise_std * z;
            }
            if cfg.dropout > 0.0 && rng.random::<f64>() < cfg.dropout {
                out = 0.0;
            }
            out
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_shape() -> EncoderShape {
        EncoderShape { input_dim: 8, trunk_widths: vec![16], embed_dim: 4, expert_heads: 3 }
    }

    fn random_input(rng: &mut SeededRng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Scalar loss `Σ_i c_i · e_i` over all emitted embeddings.
    fn probe_loss(params: &EncoderParams, x: &[f64], coeffs: &[Vec<f64>], kind: TapeKind) -> f64 {
        let out = match kind {
            TapeKind::Experts => forward_student(x, params).unwrap(),
            TapeKind::Gating => forward_gating(x, params).unwrap(),
        };
        out.embeddings.iter().zip(coeffs).map(|(e, c)| dot_unchecked(e, c)).sum()
    }

    fn check_fd(kind: TapeKind, seed: u64) {
        let mut rng = SeededRng::new(seed);
        let params = EncoderParams::init(&tiny_shape(), &mut rng);
        let x = random_input(&mut rng, 8);
        let heads = if kind == TapeKind::Experts { 3 } else { 1 };
        let coeffs: Vec<Vec<f64>> = (0..heads).map(|_| random_input(&mut rng, 4)).collect();
        let out = match kind {
            TapeKind::Experts => forward_student(&x, &params).unwrap(),
            TapeKind::Gating => forward_gating(&x, &params).unwrap(),
        };
        let grads = backward(&params, &out.tape, &coeffs).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let analytic: Vec<f64> = grads.0.slices().concat();
        let mut idx = 0;
        let n_slices = params.slices().len();
        for s in 0..n_slices {
            let len = params.slices()[s].len();
            for j in 0..len {
                let mut plus = params.clone();
                plus.slices_mut()[s][j] += h;
                let mut minus = params.clone();
                minus.slices_mut()[s][j] -= h;
                let fd = (probe_loss(&plus, &x, &coeffs, kind) - probe_loss(&minus, &x, &coeffs, kind)) / (2.0 * h);
                let a = analytic[idx];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                worst = worst.max(rel);
                idx += 1;
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn constant_network_emits_bias_direction() {
        let shape = tiny_shape();
        let mut params = EncoderParams::init(&shape, &mut SeededRng::new(1));
        for head in params.expert_heads.iter_mut().chain(std::iter::once(&mut params.gating_head)) {
            head.weight = DenseMatrix::zeros(4, 16);
            head.bias = vec![1.0, 0.0, 0.0, 0.0];
        }
        let x = random_input(&mut SeededRng::new(2), 8);
        let out = forward_student(&x, &params).unwrap();
        assert!(out.embeddings.iter().all(|e| e == &[1.0, 0.0, 0.0, 0.0]));
        let g = forward_gating(&x, &params).unwrap();
        assert_eq!(g.embeddings, vec![vec![1.0, 0.0, 0.0, 0.0]]);
        let t = forward_teacher(&x, &params.teacher_copy()).unwrap();
        assert!(t.iter().all(|e| e == &[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn forward_is_deterministic_and_unit_norm() {
        let mut rng = SeededRng::new(3);
        let params = EncoderParams::init(&tiny_shape(), &mut rng);
        let x = random_input(&mut rng, 8);
        let a = forward_student(&x, &params).unwrap();
        let b = forward_student(&x, &params).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.embeddings.len(), 3);
        let g = forward_gating(&x, &params).unwrap();
        let t = forward_teacher(&x, &params.teacher_copy()).unwrap();
        assert_eq!(t, a.embeddings);
        for e in a.embeddings.iter().chain(&g.embeddings).chain(&t) {
            assert!((crate::numcore::norm(e) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_input_dimension() {
        let params = EncoderParams::init(&tiny_shape(), &mut SeededRng::new(0));
        assert_eq!(
            forward_student(&[0.0; 5], &params).unwrap_err(),
            EncoderError::DimensionMismatch { expected: 8, got: 5 }
        );
        assert!(forward_teacher(&[0.0; 5], &params.teacher_copy()).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = SeededRng::new(4);
        let params = EncoderParams::init(&tiny_shape(), &mut rng);
        let out = forward_student(&random_input(&mut rng, 8), &params).unwrap();
        let g = backward(&params, &out.tape, &vec![vec![0.0; 4]; 3]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn tape_mismatch_detected() {
        let mut rng = SeededRng::new(5);
        let params = EncoderParams::init(&tiny_shape(), &mut rng);
        let out = forward_student(&random_input(&mut rng, 8), &params).unwrap();
        assert!(matches!(backward(&params, &out.tape, &[vec![0.0; 4]]), Err(EncoderError::TapeMismatch(_))));
        let other = EncoderParams::init(&EncoderShape { trunk_widths: vec![7], ..tiny_shape() }, &mut rng);
        assert!(matches!(backward(&other, &out.tape, &vec![vec![0.0; 4]; 3]), Err(EncoderError::TapeMismatch(_))));
    }

    #[test]
    fn scalar_chain_matches_hand_derivative() {
        // x -> tanh(w x) -> head (1x1, weight 1, bias 0) -> normalize, loss = c·y.
        // In one dimension normalization is sign(), so add a second output with a
        // fixed bias to get a non-trivial derivative:
        // u = (a, 1) with a = tanh(w x); y = u/|u|; L = y_0 = a / sqrt(a² + 1)
        // dL/dw = (1 + a²)^(-3/2) · (1 - a²) · x
        let (w, x) = (0.7, 1.3);
        let params = EncoderParams {
            trunk: vec![Affine { weight: DenseMatrix::from_vec(1, 1, vec![w]).unwrap(), bias: vec![0.0] }],
            expert_heads: vec![Affine {
                weight: DenseMatrix::from_vec(2, 1, vec![1.0, 0.0]).unwrap(),
                bias: vec![0.0, 1.0],
            }],
            gating_head: Affine::zeros(1, 2),
        };
        let out = forward_student(&[x], &params).unwrap();
        let g = backward(&params, &out.tape, &[vec![1.0, 0.0]]).unwrap();
        let a = (w * x).tanh();
        let expected = (1.0 + a * a).powf(-1.5) * (1.0 - a * a) * x;
        assert!((g.0.trunk[0].weight.as_slice()[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn student_gradients_match_finite_differences() {
        for seed in 0..3 {
            check_fd(TapeKind::Experts, seed);
        }
    }

    #[test]
    fn gating_gradients_match_finite_differences() {
        for seed in 10..13 {
            check_fd(TapeKind::Gating, seed);
        }
    }

    #[test]
    fn ema_examples() {
        let shape = EncoderShape { input_dim: 2, trunk_widths: vec![2], embed_dim: 2, expert_heads: 1 };
        let mut student = EncoderParams::init(&shape, &mut SeededRng::new(0));
        student.slices_mut().into_iter().for_each(|s| s.fill(1.0));
        let mut teacher = student.teacher_copy();
        teacher.slices_mut().into_iter().for_each(|s| s.fill(0.0));
        ema_update(&mut teacher, &student, 0.999).unwrap();
        assert!(teacher.slices().iter().all(|s| s.iter().all(|&v| (v - 0.001).abs() < 1e-15)));

        let mut copy = student.teacher_copy();
        copy.slices_mut().into_iter().for_each(|s| s.fill(-3.0));
        ema_update(&mut copy, &student, 0.0).unwrap();
        assert_eq!(copy, student.teacher_copy());

        let mut fixed = student.teacher_copy();
        ema_update(&mut fixed, &student, 0.5).unwrap();
        assert_eq!(fixed, student.teacher_copy());

        assert_eq!(ema_update(&mut fixed, &student, 1.0), Err(EncoderError::InvalidMomentum(1.0)));
        assert!(ema_update(&mut fixed, &student, -0.1).is_err());
    }

    #[test]
    fn trunk_is_shared_between_student_and_gating() {
        let mut rng = SeededRng::new(6);
        let params = EncoderParams::init(&tiny_shape(), &mut rng);
        let x = random_input(&mut rng, 8);
        let mut changed = params.clone();
        changed.trunk[0].weight.as_mut_slice()[0] += 0.5;
        assert_ne!(forward_student(&x, &params).unwrap().embeddings, forward_student(&x, &changed).unwrap().embeddings);
        assert_ne!(forward_gating(&x, &params).unwrap().embeddings, forward_gating(&x, &changed).unwrap().embeddings);
    }

    #[test]
    fn augment_examples() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let mut rng = SeededRng::new(7);
        assert_eq!(augment(&x, &mut rng, &AugmentConfig { noise_std: 0.0, dropout: 0.0 }), x);
        let cfg = AugmentConfig { noise_std: 0.1, dropout: 0.1 };
        assert_eq!(augment(&x, &mut SeededRng::new(8), &cfg), augment(&x, &mut SeededRng::new(8), &cfg));
    }

    #[test]
    fn augment_mean_offset_is_small() {
        // For a zero input the augmented mean is 0 and each coordinate has
        // standard deviation σ√(1-ρ) ≤ σ, so 10⁴ draws stay within 3σ/100.
        let cfg = AugmentConfig { noise_std: 0.1, dropout: 0.1 };
        let x = vec![0.0; 4];
        let mut rng = SeededRng::new(9);
        let n = 10_000;
        let mut mean = vec![0.0; 4];
        for _ in 0..n {
            for (m, v) in mean.iter_mut().zip(augment(&x, &mut rng, &cfg)) {
                *m += v / n as f64;
            }
        }
        for m in mean {
            assert!(m.abs() < 3.0 * cfg.noise_std / 100.0, "{m}");
        }
    }
}

//! Multilayer perceptrons with hand-written reverse-mode gradients, Gaussian
//! and categorical policy heads, Adam, and the checkpoint file format.
//!
//! Networks are generic over [`Real`] so the same code runs in `f64` (tests,
//! gradient checks) and `f32` (training throughput). Dense layers go through
//! `matrixmultiply`'s single-threaded GEMM, which is deterministic for a
//! fixed shape.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Debug;
use std::io::{Read, Write};
use std::path::Path;

/// Hidden layer widths shared by every policy and value network.
pub const HIDDEN: [usize; 3] = [256, 128, 64];
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const LOG_STD_INIT: f64 = -std::f64::consts::LN_2;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Floating point type usable by the networks.
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    const DTYPE: &'static str;

    /// `C = alpha * A B + beta * C` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le<W: Write>(self, w: &mut W) -> std::io::Result<()>;
    fn read_le<R: Read>(r: &mut R) -> std::io::Result<Self>;
}

impl Real for f32 {
    const DTYPE: &'static str = "f32";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        // SAFETY: callers pass slices sized for the requested shapes and strides.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn of_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le<W: Write>(self, w: &mut W) -> std::io::Result<()> {
        w.write_f32::<LittleEndian>(self)
    }

    fn read_le<R: Read>(r: &mut R) -> std::io::Result<Self> {
        r.read_f32::<LittleEndian>()
    }
}

impl Real for f64 {
    const DTYPE: &'static str = "f64";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    ) {
        // SAFETY: callers pass slices sized for the requested shapes and strides.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }

    fn of_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn write_le<W: Write>(self, w: &mut W) -> std::io::Result<()> {
        w.write_f64::<LittleEndian>(self)
    }

    fn read_le<R: Read>(r: &mut R) -> std::io::Result<Self> {
        r.read_f64::<LittleEndian>()
    }
}

#[inline]
pub fn elu<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp() - T::one()
    }
}

/// ELU derivative written in terms of the activation output.
#[inline]
fn elu_grad_from_output<T: Real>(y: T) -> T {
    if y > T::zero() {
        T::one()
    } else {
        y + T::one()
    }
}

/// Dense network: ELU on hidden layers, identity on the output layer.
///
/// Parameters live in one flat vector; layer `l` stores its `in x out`
/// row-major weight matrix followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    sizes: Vec<usize>,
    params: Vec<T>,
}

/// Activations recorded by [`Mlp::forward_batch`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTape<T> {
    batch: usize,
    /// `acts[0]` is the input; `acts[l + 1]` is the output of layer `l`.
    acts: Vec<Vec<T>>,
}

impl<T> MlpTape<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Orthonormal rows or columns scaled by `gain`, returned as `rows x cols` row-major.
fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    // Orthonormalize the shorter dimension's vectors with modified Gram-Schmidt.
    let (n_vec, len) = if rows >= cols { (cols, rows) } else { (rows, cols) };
    let mut vecs: Vec<Vec<f64>> = (0..n_vec)
        .map(|_| (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    for i in 0..n_vec {
        for j in 0..i {
            let (head, tail) = vecs.split_at_mut(i);
            let dot: f64 = tail[0].iter().zip(&head[j]).map(|(a, b)| a * b).sum();
            for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                *a -= dot * b;
            }
        }
        let norm = vecs[i].iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        vecs[i].iter_mut().for_each(|a| *a /= norm);
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain
                * if rows >= cols {
                    vecs[c][r]
                } else {
                    vecs[r][c]
                };
        }
    }
    out
}

impl<T: Real> Mlp<T> {
    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            sizes: sizes.to_vec(),
            params: vec![T::zero(); param_count(sizes)],
        }
    }

    /// Orthogonal weights (`hidden_gain` for hidden layers, `output_gain` for
    /// the last) and zero biases.
    pub fn orthogonal<R: Rng + ?Sized>(sizes: &[usize], hidden_gain: f64, output_gain: f64, rng: &mut R) -> Self {
        let mut mlp = Self::zeros(sizes);
        let n_layers = mlp.n_layers();
        for l in 0..n_layers {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let gain = if l + 1 == n_layers { output_gain } else { hidden_gain };
            let w = orthogonal(n_in, n_out, gain, rng);
            let (w_off, _) = mlp.layer_offsets(l);
            for (dst, src) in mlp.params[w_off..w_off + n_in * n_out].iter_mut().zip(w) {
                *dst = T::of_f64(src);
            }
        }
        mlp
    }

    pub fn from_params(sizes: &[usize], params: Vec<T>) -> Result<Self, NnError> {
        let expected = param_count(sizes);
        if params.len() != expected {
            return Err(NnError::Shape {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Offsets of layer `l`'s weights and bias in the flat parameter vector.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let before = param_count(&self.sizes[..=l]);
        (before, before + self.sizes[l] * self.sizes[l + 1])
    }

    /// Forward pass over a row-major `batch x input_dim` matrix, recording
    /// activations for [`Mlp::backward`].
    pub fn forward_batch(&self, input: &[T], batch: usize) -> Result<MlpTape<T>, NnError> {
        let expected = batch * self.input_dim();
        if input.len() != expected {
            return Err(NnError::Shape {
                expected,
                got: input.len(),
            });
        }
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(input.to_vec());
        let n_layers = self.n_layers();
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let w = &self.params[w_off..b_off];
            let b = &self.params[b_off..b_off + n_out];
            let mut y = Vec::with_capacity(batch * n_out);
            for _ in 0..batch {
                y.extend_from_slice(b);
            }
            T::gemm(
                batch,
                n_in,
                n_out,
                T::one(),
                &acts[l],
                n_in as isize,
                1,
                w,
                n_out as isize,
                1,
                T::one(),
                &mut y,
                n_out as isize,
                1,
            );
            if l + 1 < n_layers {
                y.iter_mut().for_each(|v| *v = elu(*v));
            }
            acts.push(y);
        }
        Ok(MlpTape { batch, acts })
    }

    /// Single-input forward pass.
    pub fn forward(&self, input: &[T]) -> Result<Vec<T>, NnError> {
        Ok(self.forward_batch(input, 1)?.acts.pop().unwrap_or_default())
    }

    /// Reverse pass: accumulates `d loss / d params` into `grad` given
    /// `d loss / d output` (row-major `batch x output_dim`).
    pub fn backward(&self, tape: &MlpTape<T>, d_output: &[T], grad: &mut [T]) -> Result<(), NnError> {
        let batch = tape.batch;
        let expected = batch * self.output_dim();
        if d_output.len() != expected {
            return Err(NnError::Shape {
                expected,
                got: d_output.len(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(NnError::Shape {
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        let mut delta = d_output.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let x = &tape.acts[l];
            // dW += X^T delta
            T::gemm(
                n_in,
                batch,
                n_out,
                T::one(),
                x,
                1,
                n_in as isize,
                &delta,
                n_out as isize,
                1,
                T::one(),
                &mut grad[w_off..b_off],
                n_out as isize,
                1,
            );
            let db = &mut grad[b_off..b_off + n_out];
            for row in delta.chunks_exact(n_out) {
                for (g, d) in db.iter_mut().zip(row) {
                    *g = *g + *d;
                }
            }
            if l == 0 {
                break;
            }
            // delta_prev = (delta W^T) * elu'(x)
            let w = &self.params[w_off..b_off];
            let mut prev = vec![T::zero(); batch * n_in];
            T::gemm(
                batch,
                n_out,
                n_in,
                T::one(),
                &delta,
                n_out as isize,
                1,
                w,
                1,
                n_out as isize,
                T::zero(),
                &mut prev,
                n_in as isize,
                1,
            );
            for (p, y) in prev.iter_mut().zip(x) {
                *p = *p * elu_grad_from_output(*y);
            }
            delta = prev;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    Gaussian,
    Categorical,
}

/// Distribution parameters produced by the actor for one observation.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput<T> {
    Gaussian { mean: Vec<T>, log_std: Vec<T> },
    Categorical { logits: Vec<T> },
}

/// Separate actor and critic MLPs plus the distribution head.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet<T> {
    pub head: HeadKind,
    pub actor: Mlp<T>,
    pub critic: Mlp<T>,
    /// State-independent log standard deviations (Gaussian head only).
    pub log_std: Vec<T>,
    /// Input normalization: the networks see `clamp((obs - mean) / std, ±OBS_CLIP)`.
    pub obs_mean: Vec<T>,
    pub obs_std: Vec<T>,
}

pub const OBS_CLIP: f64 = 10.0;

impl<T: Real> PolicyNet<T> {
    pub fn new<R: Rng + ?Sized>(head: HeadKind, obs_dim: usize, act_dim: usize, rng: &mut R) -> Self {
        let actor_sizes = [obs_dim, HIDDEN[0], HIDDEN[1], HIDDEN[2], act_dim];
        let critic_sizes = [obs_dim, HIDDEN[0], HIDDEN[1], HIDDEN[2], 1];
        let actor = Mlp::orthogonal(&actor_sizes, 1.0, 0.01, rng);
        let critic = Mlp::orthogonal(&critic_sizes, 1.0, 1.0, rng);
        let log_std = match head {
            HeadKind::Gaussian => vec![T::of_f64(LOG_STD_INIT); act_dim],
            HeadKind::Categorical => Vec::new(),
        };
        Self {
            head,
            actor,
            critic,
            log_std,
            obs_mean: vec![T::zero(); obs_dim],
            obs_std: vec![T::one(); obs_dim],
        }
    }

    /// Normalizes a row-major batch of raw observations.
    pub fn normalize(&self, obs: &[T]) -> Vec<T> {
        let d = self.obs_dim();
        let clip = T::of_f64(OBS_CLIP);
        obs.iter()
            .enumerate()
            .map(|(i, &x)| ((x - self.obs_mean[i % d]) / self.obs_std[i % d]).max(-clip).min(clip))
            .collect()
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn clamp_log_std(&mut self) {
        let (lo, hi) = (T::of_f64(LOG_STD_MIN), T::of_f64(LOG_STD_MAX));
        self.log_std.iter_mut().for_each(|v| *v = v.max(lo).min(hi));
    }

    fn head_output(&self, actor_out: Vec<T>) -> HeadOutput<T> {
        match self.head {
            HeadKind::Gaussian => HeadOutput::Gaussian {
                mean: actor_out,
                log_std: self.log_std.clone(),
            },
            HeadKind::Categorical => HeadOutput::Categorical { logits: actor_out },
        }
    }

    /// Distribution and value for one raw observation.
    pub fn forward(&self, obs: &[T]) -> Result<(HeadOutput<T>, T), NnError> {
        if obs.len() != self.obs_dim() {
            return Err(NnError::Shape {
                expected: self.obs_dim(),
                got: obs.len(),
            });
        }
        let x = self.normalize(obs);
        let out = self.actor.forward(&x)?;
        let value = self.critic.forward(&x)?[0];
        Ok((self.head_output(out), value))
    }

    /// Batched actor outputs and critic values for already normalized inputs.
    pub fn forward_normalized(&self, x: &[T], batch: usize) -> Result<(Vec<T>, Vec<T>), NnError> {
        let a = self.actor.forward_batch(x, batch)?;
        let v = self.critic.forward_batch(x, batch)?;
        Ok((a.acts.last().cloned().unwrap_or_default(), v.acts.last().cloned().unwrap_or_default()))
    }

    /// Batched actor outputs only, for already normalized inputs.
    pub fn actor_normalized(&self, x: &[T], batch: usize) -> Result<Vec<T>, NnError> {
        let mut a = self.actor.forward_batch(x, batch)?;
        Ok(a.acts.pop().unwrap_or_default())
    }

    pub fn head_at(&self, actor_out: &[T], row: usize) -> HeadOutput<T> {
        let d = self.act_dim();
        self.head_output(actor_out[row * d..(row + 1) * d].to_vec())
    }

    pub fn zero_grads(&self) -> PolicyGrads<T> {
        PolicyGrads {
            actor: vec![T::zero(); self.actor.params().len()],
            critic: vec![T::zero(); self.critic.params().len()],
            log_std: vec![T::zero(); self.log_std.len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.actor
            .params()
            .iter()
            .chain(self.critic.params())
            .chain(&self.log_std)
            .chain(&self.obs_mean)
            .chain(&self.obs_std)
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrads<T> {
    pub actor: Vec<T>,
    pub critic: Vec<T>,
    pub log_std: Vec<T>,
}

impl<T: Real> PolicyGrads<T> {
    pub fn global_norm(&self) -> f64 {
        self.actor
            .iter()
            .chain(&self.critic)
            .chain(&self.log_std)
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.actor.iter_mut().chain(&mut self.critic).chain(&mut self.log_std) {
            *g = *g * s;
        }
    }

    pub fn check_finite(&self) -> Result<(), NnError> {
        for (name, v) in [("actor", &self.actor), ("critic", &self.critic), ("log_std", &self.log_std)] {
            if v.iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFiniteGradient(name));
            }
        }
        Ok(())
    }
}

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

pub fn gaussian_log_prob<T: Real>(mean: &[T], log_std: &[T], action: &[T]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let (m, ls, a) = (m.as_f64(), ls.as_f64(), a.as_f64());
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

pub fn gaussian_entropy<T: Real>(log_std: &[T]) -> f64 {
    log_std.iter().map(|ls| ls.as_f64() + 0.5 + HALF_LN_2PI).sum()
}

pub fn gaussian_sample<T: Real, R: Rng + ?Sized>(mean: &[T], log_std: &[T], rng: &mut R) -> Vec<T> {
    mean.iter()
        .zip(log_std)
        .map(|(m, ls)| {
            let eps: f64 = rng.sample(StandardNormal);
            T::of_f64(m.as_f64() + ls.as_f64().exp() * eps)
        })
        .collect()
}

pub fn log_softmax<T: Real>(logits: &[T]) -> Vec<f64> {
    let max = logits.iter().map(|l| l.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l.as_f64() - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l.as_f64() - lse).collect()
}

pub fn softmax<T: Real>(logits: &[T]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn categorical_entropy<T: Real>(logits: &[T]) -> f64 {
    log_softmax(logits).iter().map(|lp| -lp.exp() * lp).sum()
}

pub fn categorical_sample<T: Real, R: Rng + ?Sized>(logits: &[T], rng: &mut R) -> usize {
    let probs = softmax(logits);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// A sampled action: continuous vector or discrete index.
#[derive(Debug, Clone, PartialEq)]
pub enum SampledAction<T> {
    Continuous(Vec<T>),
    Discrete(usize),
}

impl<T: Real> HeadOutput<T> {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (SampledAction<T>, f64) {
        match self {
            HeadOutput::Gaussian { mean, log_std } => {
                let a = gaussian_sample(mean, log_std, rng);
                let lp = gaussian_log_prob(mean, log_std, &a);
                (SampledAction::Continuous(a), lp)
            }
            HeadOutput::Categorical { logits } => {
                let i = categorical_sample(logits, rng);
                (SampledAction::Discrete(i), log_softmax(logits)[i])
            }
        }
    }

    /// Most likely action (mean, or argmax with lowest-index ties).
    pub fn mode(&self) -> SampledAction<T> {
        match self {
            HeadOutput::Gaussian { mean, .. } => SampledAction::Continuous(mean.clone()),
            HeadOutput::Categorical { logits } => SampledAction::Discrete(argmax(&softmax(logits))),
        }
    }

    pub fn log_prob(&self, action: &SampledAction<T>) -> f64 {
        match (self, action) {
            (HeadOutput::Gaussian { mean, log_std }, SampledAction::Continuous(a)) => gaussian_log_prob(mean, log_std, a),
            (HeadOutput::Categorical { logits }, SampledAction::Discrete(i)) => log_softmax(logits)[*i],
            _ => f64::NAN,
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            HeadOutput::Gaussian { log_std, .. } => gaussian_entropy(log_std),
            HeadOutput::Categorical { logits } => categorical_entropy(logits),
        }
    }
}

/// Adam with bias correction over the three parameter blocks of a policy.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: PolicyGrads<T>,
    v: PolicyGrads<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(net: &PolicyNet<T>, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: net.zero_grads(),
            v: net.zero_grads(),
        }
    }

    pub fn step(&mut self, net: &mut PolicyNet<T>, grads: &PolicyGrads<T>) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let step_size = T::of_f64(self.lr * c2.sqrt() / c1);
        let eps = T::of_f64(self.eps * c2.sqrt());
        let (tb1, tb2) = (T::of_f64(b1), T::of_f64(b2));
        let (ob1, ob2) = (T::one() - tb1, T::one() - tb2);
        let blocks: [(&mut [T], &[T], &mut Vec<T>, &mut Vec<T>); 3] = [
            (net.actor.params_mut(), &grads.actor, &mut self.m.actor, &mut self.v.actor),
            (net.critic.params_mut(), &grads.critic, &mut self.m.critic, &mut self.v.critic),
            (&mut net.log_std, &grads.log_std, &mut self.m.log_std, &mut self.v.log_std),
        ];
        for (p, g, m, v) in blocks {
            for i in 0..p.len() {
                m[i] = tb1 * m[i] + ob1 * g[i];
                v[i] = tb2 * v[i] + ob2 * g[i] * g[i];
                p[i] = p[i] - step_size * m[i] / (v[i].sqrt() + eps);
            }
        }
        net.clamp_log_std();
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing header stored in front of the parameter blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dtype: String,
    pub head: HeadKind,
    pub actor_sizes: Vec<usize>,
    pub critic_sizes: Vec<usize>,
    pub log_std_len: usize,
    /// Seeds of every run that contributed to these parameters, oldest first.
    pub seed_lineage: Vec<u64>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub net: PolicyNet<T>,
    pub seed_lineage: Vec<u64>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(net: PolicyNet<T>, seed_lineage: Vec<u64>) -> Self {
        Self {
            net,
            seed_lineage,
            metadata: BTreeMap::new(),
        }
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            version: CHECKPOINT_VERSION,
            dtype: T::DTYPE.to_string(),
            head: self.net.head,
            actor_sizes: self.net.actor.sizes().to_vec(),
            critic_sizes: self.net.critic.sizes().to_vec(),
            log_std_len: self.net.log_std.len(),
            seed_lineage: self.seed_lineage.clone(),
            metadata: self.metadata.clone(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), NnError> {
        let header = serde_json::to_vec(&self.manifest())?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(header.len() as u32)?;
        w.write_all(&header)?;
        for v in self
            .net
            .actor
            .params()
            .iter()
            .chain(self.net.critic.params())
            .chain(&self.net.log_std)
            .chain(&self.net.obs_mean)
            .chain(&self.net.obs_std)
        {
            v.write_le(w)?;
        }
        Ok(())
    }

    /// Reads a checkpoint, optionally requiring an observation dimension.
    pub fn read_from<R: Read>(r: &mut R, expected_obs_dim: Option<usize>) -> Result<Self, NnError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::IncompatibleCheckpoint("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::IncompatibleCheckpoint(format!(
                "version {version} (supported: {CHECKPOINT_VERSION})"
            )));
        }
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let m: Manifest = serde_json::from_slice(&header)?;
        if m.version != CHECKPOINT_VERSION {
            return Err(NnError::IncompatibleCheckpoint(format!("manifest version {}", m.version)));
        }
        if m.dtype != T::DTYPE {
            return Err(NnError::IncompatibleCheckpoint(format!(
                "dtype {} (expected {})",
                m.dtype,
                T::DTYPE
            )));
        }
        if m.actor_sizes.len() < 2 || m.critic_sizes.len() < 2 || m.actor_sizes[0] != m.critic_sizes[0] {
            return Err(NnError::IncompatibleCheckpoint("malformed layer manifest".into()));
        }
        if let Some(d) = expected_obs_dim {
            if m.actor_sizes[0] != d {
                return Err(NnError::IncompatibleCheckpoint(format!(
                    "observation dim {} (expected {d})",
                    m.actor_sizes[0]
                )));
            }
        }
        let expected_std = match m.head {
            HeadKind::Gaussian => *m.actor_sizes.last().unwrap(),
            HeadKind::Categorical => 0,
        };
        if m.log_std_len != expected_std {
            return Err(NnError::IncompatibleCheckpoint("log_std length".into()));
        }
        let mut read_block = |n: usize| -> Result<Vec<T>, NnError> {
            (0..n).map(|_| T::read_le(r).map_err(NnError::from)).collect()
        };
        let actor = Mlp::from_params(&m.actor_sizes, read_block(param_count(&m.actor_sizes))?)?;
        let critic = Mlp::from_params(&m.critic_sizes, read_block(param_count(&m.critic_sizes))?)?;
        let log_std = read_block(m.log_std_len)?;
        let obs_mean = read_block(m.actor_sizes[0])?;
        let obs_std = read_block(m.actor_sizes[0])?;
        Ok(Self {
            net: PolicyNet {
                head: m.head,
                actor,
                critic,
                log_std,
                obs_mean,
                obs_std,
            },
            seed_lineage: m.seed_lineage,
            metadata: m.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, expected_obs_dim: Option<usize>) -> Result<Self, NnError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f, expected_obs_dim)
    }
}

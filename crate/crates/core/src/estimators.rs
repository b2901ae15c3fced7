//! Gradient estimators for learnable prompt logits — reparameterized
//! (Gumbel-softmax), straight-through, and score-function — together with a
//! brute-force exact-gradient oracle and a Monte Carlo harness that measures
//! each estimator's per-coordinate bias and variance against it.
//!
//! The oracle-checkable setting is a lookup-table loss over all V^N prompts:
//! its expectation under independent softmax rows is exactly enumerable, and
//! its multilinear extension (the expected table value under the soft rows)
//! is what the relaxed estimators differentiate.

use rayon::prelude::*;
use thiserror::Error;

use crate::dlm::{tape_gumbel_softmax, GumbelNoise};
use crate::lm::Token;
use crate::rng::{stream_seed, Rng};
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("instance with {size} prompts exceeds oracle capacity {max}")]
    CapacityExceeded { size: usize, max: usize },
    #[error("non-finite loss in sample {sample}")]
    NonFiniteLoss { sample: usize },
    #[error("estimator not measurable: {0}")]
    Unsupported(&'static str),
}

/// Enumeration limit for the exact oracle.
pub const ORACLE_CAPACITY: usize = 100_000;

/// Temperature handling of a relaxed estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TempSpec {
    /// Constant τ.
    Fixed(f64),
    /// One learnable φ shared by all rows, τ = ε + τ0(1+tanh φ).
    LearnableShared(f64),
    /// One learnable φ per row.
    LearnableDecoupled(f64),
}

/// Estimator families. `None` marks optimizers that use no sampling at all
/// (pure relaxation); it has nothing stochastic to measure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EstimatorKind {
    Gs(TempSpec),
    StGs(TempSpec),
    Reinforce,
    None,
}

impl EstimatorKind {
    /// Stable identifier used in reports.
    pub fn id(&self) -> String {
        let temp = |t: &TempSpec| match t {
            TempSpec::Fixed(tau) => format!("tau={tau}"),
            TempSpec::LearnableShared(tau0) => format!("L,tau0={tau0}"),
            TempSpec::LearnableDecoupled(tau0) => format!("DL,tau0={tau0}"),
        };
        match self {
            EstimatorKind::Gs(t) => format!("gs({})", temp(t)),
            EstimatorKind::StGs(t) => format!("st-gs({})", temp(t)),
            EstimatorKind::Reinforce => "reinforce".into(),
            EstimatorKind::None => "none".into(),
        }
    }

    /// The τ or τ0 the estimator runs at, for report columns.
    pub fn tau_label(&self) -> Option<f64> {
        match self {
            EstimatorKind::Gs(t) | EstimatorKind::StGs(t) => Some(match t {
                TempSpec::Fixed(tau) => *tau,
                TempSpec::LearnableShared(tau0) | TempSpec::LearnableDecoupled(tau0) => *tau0,
            }),
            _ => None,
        }
    }
}

/// Exponential-moving-average baseline state for the score-function
/// estimator: b ← β·b + (1−β)·L after each gradient computation.
#[derive(Clone, Debug)]
pub struct ReinforceState {
    pub baseline: f64,
    pub beta: f64,
    pub reward_scale: f64,
    pub use_baseline: bool,
}

impl ReinforceState {
    pub fn new(beta: f64, reward_scale: f64, use_baseline: bool) -> Self {
        ReinforceState { baseline: 0.0, beta, reward_scale, use_baseline }
    }

    fn effective_baseline(&self) -> f64 {
        if self.use_baseline {
            self.baseline
        } else {
            0.0
        }
    }

    pub fn update(&mut self, loss: f64) {
        self.baseline = self.beta * self.baseline + (1.0 - self.beta) * loss;
    }
}

/// Per-coordinate bias and variance of a gradient estimator over the N×V
/// logit grid, plus their maxima. Bias entries are absent when no exact
/// oracle is available (then `max_bias` is NaN).
#[derive(Clone, Debug)]
pub struct GradStats {
    pub mean: Vec<f64>,
    pub bias: Vec<f64>,
    pub variance: Vec<f64>,
    pub max_bias: f64,
    pub max_variance: f64,
    pub mc_samples: usize,
}

impl GradStats {
    /// Monte Carlo standard error per coordinate: sqrt(var / samples).
    pub fn standard_errors(&self) -> Vec<f64> {
        self.variance.iter().map(|v| (v / self.mc_samples as f64).sqrt()).collect()
    }
}

// ── the enumerable toy problem ──────────────────────────────────────────

/// A fixed random lookup table L: V^N → [0,1). The discrete loss of a prompt
/// is its table entry; the differentiable loss of distribution rows is the
/// expected entry under independent rows (multilinear extension), which are
/// equal on one-hot rows.
#[derive(Clone, Debug)]
pub struct ToyLookupProblem {
    pub n: usize,
    pub v: usize,
    pub table: Vec<f64>,
    pub seed: u64,
}

impl ToyLookupProblem {
    pub fn new(n: usize, v: usize, seed: u64) -> Result<Self, EstimatorError> {
        let size = v.checked_pow(n as u32).filter(|&s| s <= ORACLE_CAPACITY).ok_or(
            EstimatorError::CapacityExceeded { size: usize::MAX, max: ORACLE_CAPACITY },
        )?;
        let mut rng = Rng::substream(seed, &[0x70]);
        let table = (0..size).map(|_| rng.uniform()).collect();
        Ok(ToyLookupProblem { n, v, table, seed })
    }

    fn flat_index(&self, prompt: &[Token]) -> usize {
        prompt.iter().fold(0, |acc, &t| acc * self.v + t)
    }

    pub fn loss_discrete(&self, prompt: &[Token]) -> f64 {
        self.table[self.flat_index(prompt)]
    }

    /// Multilinear extension on tape: contracts the table against each
    /// distribution row in turn.
    pub fn tape_loss(&self, tape: &mut Tape, dists: TensorId) -> TensorId {
        let (rows, v) = tape.shape(dists);
        assert_eq!((rows, v), (self.n, self.v), "tape_loss: distribution shape mismatch");
        let mut cur = tape.constant(self.table.clone(), self.v, self.table.len() / self.v);
        let mut out = dists;
        for i in 0..self.n {
            let row = tape.select_rows(dists, &[i]);
            out = tape.matmul(row, cur);
            if i + 1 < self.n {
                let (_, width) = tape.shape(out);
                cur = tape.reshape(out, self.v, width / self.v);
            }
        }
        out
    }

    /// E_{x ~ p_Z}[L(x)] by exhaustive enumeration.
    pub fn expected_loss(&self, z: &[f64]) -> f64 {
        let probs = softmax_rows(z, self.n, self.v);
        let mut expected = 0.0;
        self.for_each_prompt(|prompt, flat| {
            let p: f64 = prompt.iter().enumerate().map(|(i, &t)| probs[i * self.v + t]).product();
            expected += self.table[flat] * p;
        });
        expected
    }

    fn for_each_prompt(&self, mut f: impl FnMut(&[Token], usize)) {
        let mut prompt = vec![0usize; self.n];
        for flat in 0..self.table.len() {
            let mut rem = flat;
            for i in (0..self.n).rev() {
                prompt[i] = rem % self.v;
                rem /= self.v;
            }
            f(&prompt, flat);
        }
    }
}

fn softmax_rows(z: &[f64], _n: usize, v: usize) -> Vec<f64> {
    let mut probs = z.to_vec();
    for row in probs.chunks_mut(v) {
        crate::kernels::softmax_row(row);
    }
    probs
}

/// Σ_x L(x)·∇_Z p_Z(x) by exhaustive enumeration, with p_Z the product of
/// independent softmax rows of `z`.
pub fn true_gradient_oracle(
    z: &[f64],
    n: usize,
    v: usize,
    loss_fn_discrete: &dyn Fn(&[Token]) -> f64,
) -> Result<Vec<f64>, EstimatorError> {
    let size = v.checked_pow(n as u32).filter(|&s| s <= ORACLE_CAPACITY).ok_or(
        EstimatorError::CapacityExceeded { size: usize::MAX, max: ORACLE_CAPACITY },
    )?;
    let probs = softmax_rows(z, n, v);
    let mut grad = vec![0.0; n * v];
    let mut prompt = vec![0usize; n];
    for flat in 0..size {
        let mut rem = flat;
        for i in (0..n).rev() {
            prompt[i] = rem % v;
            rem /= v;
        }
        let l = loss_fn_discrete(&prompt);
        let p: f64 = prompt.iter().enumerate().map(|(i, &t)| probs[i * v + t]).product();
        let w = l * p;
        for i in 0..n {
            for k in 0..v {
                let indicator = if prompt[i] == k { 1.0 } else { 0.0 };
                grad[i * v + k] += w * (indicator - probs[i * v + k]);
            }
        }
    }
    Ok(grad)
}

// ── sampling estimators ─────────────────────────────────────────────────

/// Builds the τ tensor for one sample. Returns (tau tensor, optional φ leaf).
fn stage_temperature(
    tape: &mut Tape,
    temp: &TempSpec,
    phi: Option<&[f64]>,
    rows: usize,
    eps: f64,
) -> (TensorId, Option<TensorId>) {
    match temp {
        TempSpec::Fixed(tau) => {
            assert!(*tau > 0.0, "fixed temperature must be positive");
            (tape.constant(vec![*tau; rows], rows, 1), None)
        }
        TempSpec::LearnableShared(tau0) => {
            let phi = phi.expect("learnable temperature requires phi");
            assert_eq!(phi.len(), 1, "shared temperature takes a single phi");
            let leaf = tape.leaf(phi.to_vec(), 1, 1, true);
            let tau = crate::dlm::tape_effective_temperature(tape, leaf, *tau0, eps);
            (tape.tile_rows(tau, rows), Some(leaf))
        }
        TempSpec::LearnableDecoupled(tau0) => {
            let phi = phi.expect("learnable temperature requires phi");
            assert_eq!(phi.len(), rows, "decoupled temperature takes one phi per row");
            let leaf = tape.leaf(phi.to_vec(), rows, 1, true);
            let tau = crate::dlm::tape_effective_temperature(tape, leaf, *tau0, eps);
            (tau, Some(leaf))
        }
    }
}

/// Reparameterized gradient: averages the autodiff gradient of
/// `loss_fn(gumbel_softmax(z, τ, g))` over `num_samples` independent noise
/// draws. Returns gradients w.r.t. Z and (when learnable) φ, plus the mean
/// loss. With `straight_through` the loss sees one-hot forward rows.
#[allow(clippy::too_many_arguments)]
pub fn gs_gradient(
    z: &[f64],
    n: usize,
    v: usize,
    temp: &TempSpec,
    phi: Option<&[f64]>,
    eps: f64,
    straight_through: bool,
    loss_fn: &dyn Fn(&mut Tape, TensorId) -> TensorId,
    num_samples: usize,
    seed: u64,
) -> Result<(Vec<f64>, Option<Vec<f64>>, f64), EstimatorError> {
    assert!(num_samples >= 1, "gs_gradient: need at least one sample");
    let mut tape = Tape::new();
    let z_leaf = tape.leaf(z.to_vec(), n, v, true);
    let (tau, phi_leaf) = stage_temperature(&mut tape, temp, phi, n, eps);
    let mut losses = Vec::with_capacity(num_samples);
    for s in 0..num_samples {
        let noise = GumbelNoise::draw(n, v, stream_seed(&[seed, s as u64]));
        let g = tape.constant(noise.data, n, v);
        let soft = tape_gumbel_softmax(&mut tape, z_leaf, tau, g);
        let rows = if straight_through { tape.straight_through_one_hot(soft) } else { soft };
        losses.push(loss_fn(&mut tape, rows));
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = tape.add(total, l);
    }
    let loss = tape.scale(total, 1.0 / num_samples as f64);
    let loss_value = tape.values(loss)[0];
    if !loss_value.is_finite() {
        return Err(EstimatorError::NonFiniteLoss { sample: num_samples });
    }
    if !tape.tensor(loss).requires_grad {
        // loss ignored the samples entirely; the gradient is exactly zero
        return Ok((vec![0.0; n * v], phi.map(|p| vec![0.0; p.len()]), loss_value));
    }
    tape.backward(loss);
    let gz = tape.grad(z_leaf).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n * v]);
    let gphi = phi_leaf.map(|id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; phi.unwrap().len()]));
    Ok((gz, gphi, loss_value))
}

/// Score-function gradient with EMA baseline: samples hard prompts from the
/// softmax rows of `z`, scores them with the (not necessarily
/// differentiable) discrete loss, and returns the mean of
/// `(L−b)·scale·∇_Z log p_Z(x)`. The baseline updates after the gradient is
/// formed.
pub fn reinforce_gradient(
    z: &[f64],
    n: usize,
    v: usize,
    loss_fn_discrete: &dyn Fn(&[Token]) -> f64,
    state: &mut ReinforceState,
    num_samples: usize,
    seed: u64,
) -> Result<(Vec<f64>, f64), EstimatorError> {
    assert!(num_samples >= 1, "reinforce_gradient: need at least one sample");
    let probs = softmax_rows(z, n, v);
    let baseline = state.effective_baseline();
    let mut grad = vec![0.0; n * v];
    let mut mean_loss = 0.0;
    let mut rng = Rng::new(seed);
    let mut prompt = vec![0usize; n];
    for s in 0..num_samples {
        for (i, slot) in prompt.iter_mut().enumerate() {
            *slot = rng.categorical(&probs[i * v..(i + 1) * v]);
        }
        let loss = loss_fn_discrete(&prompt);
        if !loss.is_finite() {
            return Err(EstimatorError::NonFiniteLoss { sample: s });
        }
        mean_loss += loss;
        let w = (loss - baseline) * state.reward_scale / num_samples as f64;
        for i in 0..n {
            for k in 0..v {
                let indicator = if prompt[i] == k { 1.0 } else { 0.0 };
                grad[i * v + k] += w * (indicator - probs[i * v + k]);
            }
        }
    }
    mean_loss /= num_samples as f64;
    state.update(mean_loss);
    Ok((grad, mean_loss))
}

// ── bias / variance measurement ─────────────────────────────────────────

const MEASURE_CHUNK: usize = 2048;

/// Streams single-sample estimates from `sampler` (one per derived seed) and
/// accumulates per-coordinate mean and variance; bias is taken against
/// `oracle` when provided. Chunked so repetitions can run in parallel while
/// the merged result stays independent of thread scheduling.
pub fn measure_stream(
    dim: usize,
    oracle: Option<&[f64]>,
    mc_samples: usize,
    seed: u64,
    sampler: impl Fn(u64) -> Vec<f64> + Sync,
) -> GradStats {
    assert!(mc_samples >= 2, "measure_stream: need at least two samples");
    let n_chunks = mc_samples.div_ceil(MEASURE_CHUNK);
    let chunks: Vec<(usize, Vec<f64>, Vec<f64>)> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let lo = ci * MEASURE_CHUNK;
            let hi = ((ci + 1) * MEASURE_CHUNK).min(mc_samples);
            let mut count = 0usize;
            let mut mean = vec![0.0; dim];
            let mut m2 = vec![0.0; dim];
            for s in lo..hi {
                let est = sampler(stream_seed(&[seed, 0x4D43, s as u64]));
                debug_assert_eq!(est.len(), dim);
                count += 1;
                let inv = 1.0 / count as f64;
                for (j, &x) in est.iter().enumerate() {
                    let delta = x - mean[j];
                    mean[j] += delta * inv;
                    m2[j] += delta * (x - mean[j]);
                }
            }
            (count, mean, m2)
        })
        .collect();

    let mut count = 0usize;
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    for (cn, cmean, cm2) in chunks {
        if cn == 0 {
            continue;
        }
        if count == 0 {
            count = cn;
            mean = cmean;
            m2 = cm2;
            continue;
        }
        let total = count + cn;
        for j in 0..dim {
            let delta = cmean[j] - mean[j];
            mean[j] += delta * cn as f64 / total as f64;
            m2[j] += cm2[j] + delta * delta * (count as f64 * cn as f64 / total as f64);
        }
        count = total;
    }
    let variance: Vec<f64> = m2.iter().map(|&v| v / (count as f64 - 1.0)).collect();
    let bias: Vec<f64> = match oracle {
        Some(o) => mean.iter().zip(o).map(|(m, t)| (m - t).abs()).collect(),
        None => Vec::new(),
    };
    let max_bias = bias.iter().cloned().fold(f64::NAN, f64::max);
    let max_variance = variance.iter().cloned().fold(0.0, f64::max);
    GradStats { mean, bias, variance, max_bias, max_variance, mc_samples: count }
}

/// Bias/variance of single-sample estimates of `kind` on the toy problem, at
/// the parameter point (`z`, `phi`). The score-function estimator is
/// measured baseline-free so its unbiasedness is visible directly.
pub fn measure_bias_variance(
    kind: &EstimatorKind,
    problem: &ToyLookupProblem,
    z: &[f64],
    phi: Option<&[f64]>,
    eps: f64,
    mc_samples: usize,
    seed: u64,
) -> Result<GradStats, EstimatorError> {
    let (n, v) = (problem.n, problem.v);
    let oracle = true_gradient_oracle(z, n, v, &|p| problem.loss_discrete(p))?;
    let stats = match kind {
        EstimatorKind::None => {
            return Err(EstimatorError::Unsupported("no sampling estimator to measure"));
        }
        EstimatorKind::Reinforce => measure_stream(n * v, Some(&oracle), mc_samples, seed, |s| {
            let mut state = ReinforceState::new(0.9, 1.0, false);
            let (g, _) =
                reinforce_gradient(z, n, v, &|p| problem.loss_discrete(p), &mut state, 1, s)
                    .expect("finite table loss");
            g
        }),
        EstimatorKind::Gs(temp) | EstimatorKind::StGs(temp) => {
            let st = matches!(kind, EstimatorKind::StGs(_));
            measure_stream(n * v, Some(&oracle), mc_samples, seed, |s| {
                let (g, _, _) = gs_gradient(
                    z,
                    n,
                    v,
                    temp,
                    phi,
                    eps,
                    st,
                    &|tape, rows| problem.tape_loss(tape, rows),
                    1,
                    s,
                )
                .expect("finite table loss");
                g
            })
        }
    };
    Ok(stats)
}

//! The differentiable counterpart of the hard pipeline: token distributions
//! instead of tokens, expected embeddings instead of lookups, and
//! Gumbel-softmax sampling with learnable per-position temperatures instead
//! of categorical draws.
//!
//! Every operation exists twice: a direct evaluator (via [`LmSession`]) and a
//! tape builder used under optimization. Both run the same kernels in the
//! same order, so on one-hot inputs the relaxed pipeline reproduces the hard
//! pipeline bit for bit.

use thiserror::Error;

use crate::lm::{LmError, LmGraph, LmSession, LmWeights, TapeKvCache, Token};
use crate::rng::Rng;
use crate::tensor::{Tape, TensorId};

#[derive(Debug, Error)]
pub enum DlmError {
    #[error("row {row} is not a probability distribution (sum {sum})")]
    InvalidDistribution { row: usize, sum: f64 },
    #[error("temperature {value} at position {index} is not positive")]
    NonPositiveTemperature { index: usize, value: f64 },
    #[error("sequence of length {len} exceeds maximum {max}")]
    LengthOverflow { len: usize, max: usize },
    #[error(transparent)]
    Lm(#[from] LmError),
}

/// A sequence of probability rows over the vocabulary (L×V, row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct DistSeq {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
}

impl DistSeq {
    pub fn new(data: Vec<f64>, rows: usize, vocab: usize) -> Result<Self, DlmError> {
        assert_eq!(data.len(), rows * vocab, "DistSeq: buffer length mismatch");
        let seq = DistSeq { rows, vocab, data };
        seq.validate()?;
        Ok(seq)
    }

    pub fn one_hot(tokens: &[Token], vocab: usize) -> Self {
        let mut data = vec![0.0; tokens.len() * vocab];
        for (i, &t) in tokens.iter().enumerate() {
            assert!(t < vocab, "one_hot: token {t} out of range");
            data[i * vocab + t] = 1.0;
        }
        DistSeq { rows: tokens.len(), vocab, data }
    }

    pub fn uniform(rows: usize, vocab: usize) -> Self {
        DistSeq { rows, vocab, data: vec![1.0 / vocab as f64; rows * vocab] }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    /// Every row must be non-negative and sum to 1 within 1e-6.
    pub fn validate(&self) -> Result<(), DlmError> {
        for (i, row) in self.data.chunks(self.vocab).enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
                return Err(DlmError::InvalidDistribution { row: i, sum });
            }
        }
        Ok(())
    }

    /// Per-row argmax, ties to the lowest id.
    pub fn argmax_tokens(&self) -> Vec<Token> {
        self.data.chunks(self.vocab).map(crate::lm::argmax_lowest).collect()
    }
}

/// Standard Gumbel(0,1) noise for one sample: one row per prompt position.
#[derive(Clone, Debug)]
pub struct GumbelNoise {
    pub rows: usize,
    pub vocab: usize,
    pub data: Vec<f64>,
    /// Stream seed the draws came from.
    pub seed: u64,
}

impl GumbelNoise {
    pub fn draw(rows: usize, vocab: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let mut data = vec![0.0; rows * vocab];
        rng.fill_gumbel(&mut data);
        GumbelNoise { rows, vocab, data, seed }
    }
}

// ── plain operations ────────────────────────────────────────────────────

/// Expected embedding of each distribution row (`row @ W_E`) plus positional
/// encoding, positions starting at `pos_start`. Linear in the rows; one-hot
/// rows reproduce the hard lookup exactly.
pub fn soft_embed(w: &LmWeights, dists: &DistSeq, pos_start: usize) -> Result<Vec<f64>, DlmError> {
    dists.validate()?;
    assert_eq!(dists.vocab, w.config.vocab_size, "soft_embed: vocabulary mismatch");
    if pos_start + dists.rows > w.config.max_seq_len {
        return Err(DlmError::LengthOverflow { len: pos_start + dists.rows, max: w.config.max_seq_len });
    }
    let d = w.config.d_model;
    let mut out = vec![0.0; dists.rows * d];
    crate::kernels::matmul(&dists.data, &w.token_embedding, dists.rows, dists.vocab, d, &mut out);
    for (i, row) in out.chunks_mut(d).enumerate() {
        let pos = &w.positional()[(pos_start + i) * d..(pos_start + i + 1) * d];
        for (o, &p) in row.iter_mut().zip(pos) {
            *o += p;
        }
    }
    Ok(out)
}

/// τ_i = ε + τ0·(1 + tanh(φ_i)); every entry lies strictly inside
/// (ε, ε + 2τ0) until f64 tanh saturation (|φ| ≳ 19), where the bound is
/// attained exactly.
pub fn effective_temperature(phi: &[f64], tau0: f64, eps: f64) -> Vec<f64> {
    assert!(tau0 > 0.0 && eps > 0.0, "effective_temperature: tau0 and eps must be positive");
    phi.iter().map(|&p| (p.tanh() + 1.0) * tau0 + eps).collect()
}

/// Tape version of [`effective_temperature`], differentiable w.r.t. φ.
pub fn tape_effective_temperature(tape: &mut Tape, phi: TensorId, tau0: f64, eps: f64) -> TensorId {
    assert!(tau0 > 0.0 && eps > 0.0, "effective_temperature: tau0 and eps must be positive");
    let t = tape.tanh(phi);
    let shifted = tape.add_scalar(t, 1.0);
    let scaled = tape.scale(shifted, tau0);
    tape.add_scalar(scaled, eps)
}

fn check_temperatures(tau: &[f64]) -> Result<(), DlmError> {
    for (i, &t) in tau.iter().enumerate() {
        if t <= 0.0 {
            return Err(DlmError::NonPositiveTemperature { index: i, value: t });
        }
    }
    Ok(())
}

/// Row i = softmax((z_i + g_i) / τ_i): a reparameterized continuous sample
/// from the categorical given by logits `z`.
pub fn gumbel_softmax_sample(
    z: &[f64],
    rows: usize,
    vocab: usize,
    tau: &[f64],
    noise: &GumbelNoise,
) -> Result<DistSeq, DlmError> {
    assert_eq!(z.len(), rows * vocab, "gumbel_softmax_sample: logits shape mismatch");
    assert_eq!(noise.rows, rows, "gumbel_softmax_sample: noise rows mismatch");
    assert_eq!(tau.len(), rows, "gumbel_softmax_sample: one temperature per row required");
    check_temperatures(tau)?;
    let mut data = vec![0.0; rows * vocab];
    for i in 0..rows {
        let inv = 1.0 / tau[i];
        let row = &mut data[i * vocab..(i + 1) * vocab];
        for j in 0..vocab {
            row[j] = (z[i * vocab + j] + noise.data[i * vocab + j]) * inv;
        }
        crate::kernels::softmax_row(row);
    }
    Ok(DistSeq { rows, vocab, data })
}

/// Tape version of [`gumbel_softmax_sample`]: `z` is rows×V, `tau` rows×1,
/// `noise` a constant rows×V tensor. Differentiable w.r.t. both `z` and `tau`.
pub fn tape_gumbel_softmax(tape: &mut Tape, z: TensorId, tau: TensorId, noise: TensorId) -> TensorId {
    for &t in tape.values(tau) {
        assert!(t > 0.0, "gumbel_softmax: non-positive temperature {t}");
    }
    let zg = tape.add(z, noise);
    let inv = tape.recip(tau);
    let scaled = tape.scale_rows(zg, inv);
    tape.row_softmax(scaled)
}

/// Straight-through sample: the forward value is the exact one-hot at each
/// soft row's argmax while the soft rows carry the gradient path.
pub fn straight_through_sample(
    z: &[f64],
    rows: usize,
    vocab: usize,
    tau: &[f64],
    noise: &GumbelNoise,
) -> Result<(DistSeq, DistSeq), DlmError> {
    let soft = gumbel_softmax_sample(z, rows, vocab, tau, noise)?;
    let hard = DistSeq::one_hot(&soft.argmax_tokens(), vocab);
    Ok((hard, soft))
}

// ── taped forward passes ────────────────────────────────────────────────

/// Builds the teacher-forced forward on tape for `blocks` independent prompt
/// samples sharing one target. `prompt_dists` holds blocks×N probability
/// rows; the input to the core is the soft-embedded prompt followed by the
/// one-hot embeddings of `target[..M-1]`, and the result is the M predicted
/// rows per block (τ=1 softmax, no noise), as a (blocks·M)×V tensor.
pub fn tape_teacher_forced(
    tape: &mut Tape,
    graph: &LmGraph,
    prompt_dists: TensorId,
    target: &[Token],
    blocks: usize,
) -> TensorId {
    let (rows, _v) = tape.shape(prompt_dists);
    assert!(blocks > 0 && rows % blocks == 0, "tape_teacher_forced: bad block structure");
    let n = rows / blocks;
    let m = target.len();
    assert!(m > 0, "tape_teacher_forced: empty target");
    let prompt_positions: Vec<usize> = (0..n).collect();
    let p_emb = graph.embed_soft(tape, prompt_dists, &prompt_positions, blocks);
    let x = if m > 1 {
        let t_emb = graph.embed_hard(tape, &target[..m - 1], n, blocks);
        tape.block_concat_rows(p_emb, t_emb, blocks)
    } else {
        p_emb
    };
    let hidden = graph.transformer(tape, x, blocks);
    // predicted row t of a block comes from input position n-1+t
    let len = n + m - 1;
    let idx: Vec<usize> = (0..blocks).flat_map(|b| (0..m).map(move |t| b * len + n - 1 + t)).collect();
    let sel = tape.select_rows(hidden, &idx);
    let logits = graph.logits(tape, sel);
    tape.row_softmax(logits)
}

/// Builds the autoregressive soft forward on tape: M soft rows per block,
/// each τ=1 softmax of the logits given the prompt and the previously
/// generated soft rows fed back through the soft embedding. Incremental with
/// a taped KV cache; gradients flow through the feedback.
pub fn tape_autoregressive_soft(
    tape: &mut Tape,
    graph: &LmGraph,
    prompt_dists: TensorId,
    m: usize,
    blocks: usize,
) -> TensorId {
    let (rows, _v) = tape.shape(prompt_dists);
    assert!(blocks > 0 && rows % blocks == 0, "tape_autoregressive_soft: bad block structure");
    let n = rows / blocks;
    assert!(m > 0, "tape_autoregressive_soft: nothing to generate");
    let prompt_positions: Vec<usize> = (0..n).collect();
    let p_emb = graph.embed_soft(tape, prompt_dists, &prompt_positions, blocks);
    let mut kv = TapeKvCache::empty(graph.config.n_layers);
    let hidden = graph.transformer_step(tape, p_emb, blocks, &mut kv);
    let last_idx: Vec<usize> = (0..blocks).map(|b| b * n + n - 1).collect();
    let last = tape.select_rows(hidden, &last_idx);
    let logits = graph.logits(tape, last);
    let mut y = tape.row_softmax(logits);
    let mut out = y;
    for t in 1..m {
        let emb = graph.embed_soft(tape, y, &[n + t - 1], blocks);
        let h = graph.transformer_step(tape, emb, blocks, &mut kv);
        let logits = graph.logits(tape, h);
        y = tape.row_softmax(logits);
        out = tape.block_concat_rows(out, y, blocks);
    }
    out
}

/// Cross-entropy of predicted soft rows against the hard target, averaged
/// over positions and blocks: mean over rows of −log ŷ[y]. `predicted` is
/// (blocks·M)×V block-major.
pub fn tape_target_loss(tape: &mut Tape, predicted: TensorId, target: &[Token], blocks: usize) -> TensorId {
    let (rows, _v) = tape.shape(predicted);
    let m = target.len();
    assert_eq!(rows, blocks * m, "tape_target_loss: predicted rows do not match blocks x target length");
    let idx: Vec<usize> = (0..rows).map(|r| target[r % m]).collect();
    let picked = tape.row_pick(predicted, &idx);
    let lp = tape.log(picked);
    let mean = tape.mean(lp);
    tape.scale(mean, -1.0)
}

// ── plain forward passes ────────────────────────────────────────────────

fn check_forward_len(w: &LmWeights, n: usize, m: usize) -> Result<(), DlmError> {
    let len = n + m;
    if len > w.config.max_seq_len + 1 {
        return Err(DlmError::LengthOverflow { len, max: w.config.max_seq_len });
    }
    Ok(())
}

/// Teacher-forced soft forward: predicted row `t` is the model's τ=1
/// distribution for target position `t` given the soft prompt and the true
/// targets before `t`. No Gumbel noise on the output side.
pub fn forward_teacher_forced(
    w: &LmWeights,
    prompt_dists: &DistSeq,
    target: &[Token],
) -> Result<DistSeq, DlmError> {
    prompt_dists.validate()?;
    let m = target.len();
    assert!(m > 0, "forward_teacher_forced: empty target");
    check_forward_len(w, prompt_dists.rows, m)?;
    let emb = soft_embed(w, prompt_dists, 0)?;
    let d = w.config.d_model;
    let mut session = LmSession::new(w);
    let mut logits = Vec::new();
    for row in emb.chunks(d) {
        logits = session.push_embedding(row);
    }
    let v = w.config.vocab_size;
    let mut data = Vec::with_capacity(m * v);
    for t in 0..m {
        let mut row = logits.clone();
        crate::kernels::softmax_row(&mut row);
        data.extend_from_slice(&row);
        if t + 1 < m {
            logits = session.push_token(target[t])?;
        }
    }
    Ok(DistSeq { rows: m, vocab: v, data })
}

/// Autoregressive soft forward: each generated τ=1 softmax row is fed back
/// through the soft embedding as the next input.
pub fn forward_autoregressive_soft(
    w: &LmWeights,
    prompt_dists: &DistSeq,
    m: usize,
) -> Result<DistSeq, DlmError> {
    prompt_dists.validate()?;
    assert!(m > 0, "forward_autoregressive_soft: nothing to generate");
    check_forward_len(w, prompt_dists.rows, m)?;
    let emb = soft_embed(w, prompt_dists, 0)?;
    let d = w.config.d_model;
    let v = w.config.vocab_size;
    let mut session = LmSession::new(w);
    let mut logits = Vec::new();
    for row in emb.chunks(d) {
        logits = session.push_embedding(row);
    }
    let mut data = Vec::with_capacity(m * v);
    for t in 0..m {
        let mut row = logits.clone();
        crate::kernels::softmax_row(&mut row);
        data.extend_from_slice(&row);
        if t + 1 < m {
            let soft = DistSeq { rows: 1, vocab: v, data: row.clone() };
            let fed = soft_embed(w, &soft, prompt_dists.rows + t)?;
            logits = session.push_embedding(&fed);
        }
    }
    Ok(DistSeq { rows: m, vocab: v, data })
}

//! Inverting a small frozen language model by gradient descent.
//!
//! The crate makes the full autoregressive pipeline of a toy decoder-only
//! transformer differentiable — soft embeddings over token distributions plus
//! Gumbel-softmax next-token sampling with learnable per-position temperatures
//! — and optimizes prompt logits so the frozen model emits a specified target
//! sequence. Alongside the main inverter it ships the comparison optimizers
//! (score-function, fixed-temperature, relaxation-only), a brute-force
//! gradient oracle with a bias/variance measurement harness, a
//! difficulty-ranked target generator, and sequence-level evaluation metrics.

mod kernels;

pub mod dlm;
pub mod estimators;
pub mod experiment;
pub mod inverter;
pub mod lm;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod targets;
pub mod tensor;

/// FNV-1a content hash used for weight and config fingerprints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub use dlm::{DistSeq, GumbelNoise};
pub use estimators::{EstimatorKind, GradStats, TempSpec, ToyLookupProblem};
pub use experiment::{SweepConfig, SweepResult};
pub use inverter::{InversionConfig, Method, PromptParams, RunOutput, StepLog};
pub use lm::{LmConfig, LmWeights, Token};
pub use metrics::EvalRecord;
pub use rng::Rng;
pub use targets::{DifficultySpec, TargetRecord};
pub use tensor::{Tape, Tensor, TensorId};

//! Sweep orchestration: runs (method × seed × target) matrices against one
//! frozen checkpoint, evaluates any-time snapshots at the configured step
//! budgets, and writes the manifest / record / log files the command-line
//! harness and the acceptance suite both consume. Units run in parallel;
//! every unit owns a derived seed, so results are independent of scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dlm::{tape_gumbel_softmax, tape_target_loss, tape_teacher_forced, GumbelNoise};
use crate::estimators::{
    measure_stream, EstimatorKind, GradStats, ReinforceState, TempSpec, ToyLookupProblem,
};
use crate::inverter::{
    hard_teacher_forced_loss, run_inversion, InversionConfig, InversionError, Method,
    StepLog, STEP_CSV_HEADER,
};
use crate::lm::{LmGraph, LmWeights, Token};
use crate::metrics::{evaluate_run, EvalRecord};
use crate::rng::{stream_seed, Rng};
use crate::targets::TargetRecord;
use crate::tensor::Tape;

/// A full inversion sweep over one dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub prompt_len: usize,
    pub steps: usize,
    /// Any-time evaluation points; the final step is always evaluated.
    pub budgets: Vec<usize>,
    pub num_samples: usize,
    pub epsilon: f64,
    /// Per-method learning-rate override; `None` keeps each method's default.
    pub learning_rate: Option<f64>,
    /// Record the greedy LCS in the step log every this many steps (0 = off).
    pub eval_every: usize,
    /// Worker threads (0 = one per available core).
    pub parallelism: usize,
}

impl SweepConfig {
    pub fn new(methods: Vec<Method>, seeds: Vec<u64>, prompt_len: usize, steps: usize) -> Self {
        SweepConfig {
            methods,
            seeds,
            prompt_len,
            steps,
            budgets: vec![256, 2048],
            num_samples: 8,
            epsilon: 1e-2,
            learning_rate: None,
            eval_every: 0,
            parallelism: 0,
        }
    }

    /// Stable fingerprint of the configuration.
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(self).expect("sweep config serializes");
        format!("{:016x}", crate::fnv1a64(text.as_bytes()))
    }
}

/// How a single run ended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum RunOutcome {
    Completed,
    /// The loss went non-finite; the run stopped and kept its partial logs.
    Aborted { step: usize, last_loss: f64 },
}

/// One (method, seed, target) unit of a sweep.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    pub target_index: usize,
    pub k: usize,
    pub outcome: RunOutcome,
    pub logs: Vec<StepLog>,
}

pub struct SweepResult {
    pub records: Vec<EvalRecord>,
    pub runs: Vec<RunSummary>,
}

impl SweepResult {
    pub fn any_aborted(&self) -> bool {
        self.runs.iter().any(|r| matches!(r.outcome, RunOutcome::Aborted { .. }))
    }
}

/// First step index whose loss reaches half of the first step's loss.
pub fn steps_to_halve(logs: &[StepLog]) -> Option<usize> {
    let initial = logs.first()?.loss;
    logs.iter().find(|l| l.loss <= 0.5 * initial).map(|l| l.step)
}

/// Runs the full matrix. Deterministic: every unit derives its seed from the
/// sweep seed and the target's own seed, and results are collected in matrix
/// order regardless of scheduling.
pub fn run_sweep(w: &LmWeights, targets: &[TargetRecord], cfg: &SweepConfig) -> SweepResult {
    let mut units = Vec::new();
    for method in &cfg.methods {
        for (target_index, target) in targets.iter().enumerate() {
            for &seed in &cfg.seeds {
                units.push((method.clone(), target_index, target, seed));
            }
        }
    }
    let run_unit = |(method, target_index, target, seed): &(Method, usize, &TargetRecord, u64)| {
        let mut config = InversionConfig::new(method.clone(), cfg.prompt_len, cfg.steps, 0);
        config.seed = stream_seed(&[*seed, target.seed]);
        config.num_samples = cfg.num_samples;
        config.epsilon = cfg.epsilon;
        config.eval_every = cfg.eval_every;
        if let Some(lr) = cfg.learning_rate {
            config.learning_rate = lr;
        }
        let mut budgets: Vec<usize> = cfg.budgets.iter().copied().filter(|&b| b <= cfg.steps).collect();
        if !budgets.contains(&cfg.steps) {
            budgets.push(cfg.steps);
        }
        config.budgets = budgets;
        let label = method.label();
        match run_inversion(w, &target.tokens, &config) {
            Ok(out) => {
                let records = out
                    .snapshots
                    .iter()
                    .map(|(budget, z)| {
                        evaluate_run(w, z, &target.tokens, target.k, &label, *seed, *budget)
                            .expect("evaluation of a completed snapshot")
                    })
                    .collect::<Vec<_>>();
                let summary = RunSummary {
                    method: label,
                    seed: *seed,
                    target_index: *target_index,
                    k: target.k,
                    outcome: RunOutcome::Completed,
                    logs: out.logs,
                };
                (records, summary)
            }
            Err(InversionError::NumericAbort { step, last_loss }) => {
                let summary = RunSummary {
                    method: label,
                    seed: *seed,
                    target_index: *target_index,
                    k: target.k,
                    outcome: RunOutcome::Aborted { step, last_loss },
                    logs: Vec::new(),
                };
                (Vec::new(), summary)
            }
            Err(e) => panic!("inversion unit failed structurally: {e}"),
        }
    };
    let outputs: Vec<(Vec<EvalRecord>, RunSummary)> = if cfg.parallelism == 1 {
        units.iter().map(run_unit).collect()
    } else if cfg.parallelism == 0 {
        units.par_iter().map(run_unit).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.parallelism)
            .build()
            .expect("worker pool");
        pool.install(|| units.par_iter().map(run_unit).collect())
    };
    let mut records = Vec::new();
    let mut runs = Vec::new();
    for (recs, summary) in outputs {
        records.extend(recs);
        runs.push(summary);
    }
    SweepResult { records, runs }
}

/// Manifest written next to every sweep's outputs: a full config echo plus
/// content hashes for cross-file consistency checks.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepManifest {
    pub version: u32,
    pub weights_hash: String,
    pub config_hash: String,
    pub sweep: SweepConfig,
    pub n_targets: usize,
}

/// Writes `manifest.json`, `records.csv`, and one step-log CSV per run under
/// `out_dir/runs/`.
pub fn write_sweep_outputs(
    out_dir: &Path,
    w: &LmWeights,
    cfg: &SweepConfig,
    targets: &[TargetRecord],
    result: &SweepResult,
) -> std::io::Result<()> {
    std::fs::create_dir_all(out_dir.join("runs"))?;
    let manifest = SweepManifest {
        version: 1,
        weights_hash: w.content_hash(),
        config_hash: cfg.config_hash(),
        sweep: cfg.clone(),
        n_targets: targets.len(),
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    std::fs::write(out_dir.join("records.csv"), EvalRecord::write_csv(&result.records))?;
    for run in &result.runs {
        let mut text = String::from(STEP_CSV_HEADER);
        text.push('\n');
        for log in &run.logs {
            text.push_str(&log.to_csv_row());
            text.push('\n');
        }
        let name = format!("{}-s{}-t{:03}.csv", run.method, run.seed, run.target_index);
        std::fs::write(out_dir.join("runs").join(name), text)?;
    }
    Ok(())
}

// ── gradient-statistics harness ─────────────────────────────────────────

/// The estimator set reported by the statistics command: the score-function
/// estimator, fixed-τ relaxations at 1 and 100, and learnable (shared and
/// decoupled) temperatures started at both values.
pub fn default_estimator_set() -> Vec<EstimatorKind> {
    vec![
        EstimatorKind::Reinforce,
        EstimatorKind::Gs(TempSpec::Fixed(1.0)),
        EstimatorKind::Gs(TempSpec::Fixed(100.0)),
        EstimatorKind::Gs(TempSpec::LearnableShared(1.0)),
        EstimatorKind::Gs(TempSpec::LearnableShared(100.0)),
        EstimatorKind::Gs(TempSpec::LearnableDecoupled(1.0)),
        EstimatorKind::Gs(TempSpec::LearnableDecoupled(100.0)),
    ]
}

pub const GRAD_STATS_CSV_HEADER: &str = "estimator,tau,mc_samples,max_bias,max_variance,seed";

pub fn grad_stats_csv(rows: &[(EstimatorKind, GradStats)], seed: u64) -> String {
    let mut out = String::from(GRAD_STATS_CSV_HEADER);
    out.push('\n');
    for (kind, stats) in rows {
        let tau = kind.tau_label().map(|t| t.to_string()).unwrap_or_default();
        let bias = if stats.max_bias.is_nan() { String::new() } else { stats.max_bias.to_string() };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            kind.id(),
            tau,
            stats.mc_samples,
            bias,
            stats.max_variance,
            seed
        ));
    }
    out
}

/// Measures every estimator in `set` on the enumerable lookup problem at a
/// shared random parameter point. Bias is taken against the exact oracle.
pub fn run_grad_stats_toy(
    problem: &ToyLookupProblem,
    set: &[EstimatorKind],
    mc_samples: usize,
    seed: u64,
) -> Vec<(EstimatorKind, GradStats)> {
    let (n, v) = (problem.n, problem.v);
    let mut rng = Rng::substream(seed, &[0xF1]);
    let z: Vec<f64> = (0..n * v).map(|_| rng.normal()).collect();
    let phi_shared: Vec<f64> = vec![rng.normal()];
    let phi_dec: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    set.iter()
        .map(|kind| {
            let phi = match kind {
                EstimatorKind::Gs(t) | EstimatorKind::StGs(t) => match t {
                    TempSpec::Fixed(_) => None,
                    TempSpec::LearnableShared(_) => Some(phi_shared.as_slice()),
                    TempSpec::LearnableDecoupled(_) => Some(phi_dec.as_slice()),
                },
                _ => None,
            };
            let stats = crate::estimators::measure_bias_variance(
                kind, problem, &z, phi, 1e-2, mc_samples, seed,
            )
            .expect("toy problem within oracle capacity");
            (*kind, stats)
        })
        .collect()
}

/// Variance-only measurement in the full differentiable-pipeline setting (no
/// exact oracle exists there): single-noise-sample gradients of the
/// teacher-forced loss at a fixed random (Z, Φ).
pub fn run_grad_stats_dlm(
    w: &LmWeights,
    target: &[Token],
    prompt_len: usize,
    set: &[EstimatorKind],
    mc_samples: usize,
    seed: u64,
) -> Vec<(EstimatorKind, GradStats)> {
    let (n, v) = (prompt_len, w.config.vocab_size);
    let mut rng = Rng::substream(seed, &[0xF2]);
    let z: Vec<f64> = (0..n * v).map(|_| rng.normal()).collect();
    let phi_shared = vec![rng.normal()];
    let phi_dec: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let eps = 1e-2;

    let gs_sampler = |temp: TempSpec, st: bool| {
        let z = z.clone();
        let phi_shared = phi_shared.clone();
        let phi_dec = phi_dec.clone();
        move |sample_seed: u64| -> Vec<f64> {
            let mut tape = Tape::new();
            let graph = LmGraph::stage(&mut tape, w, false);
            let z_leaf = tape.leaf(z.clone(), n, v, true);
            let tau = match temp {
                TempSpec::Fixed(t) => tape.constant(vec![t; n], n, 1),
                TempSpec::LearnableShared(tau0) => {
                    let leaf = tape.constant(phi_shared.clone(), 1, 1);
                    let t = crate::dlm::tape_effective_temperature(&mut tape, leaf, tau0, eps);
                    tape.tile_rows(t, n)
                }
                TempSpec::LearnableDecoupled(tau0) => {
                    let leaf = tape.constant(phi_dec.clone(), n, 1);
                    crate::dlm::tape_effective_temperature(&mut tape, leaf, tau0, eps)
                }
            };
            let noise = GumbelNoise::draw(n, v, sample_seed);
            let g = tape.constant(noise.data, n, v);
            let soft = tape_gumbel_softmax(&mut tape, z_leaf, tau, g);
            let rows = if st { tape.straight_through_one_hot(soft) } else { soft };
            let predicted = tape_teacher_forced(&mut tape, &graph, rows, target, 1);
            let loss = tape_target_loss(&mut tape, predicted, target, 1);
            tape.backward(loss);
            tape.grad(z_leaf).expect("z gradient").to_vec()
        }
    };

    set.iter()
        .map(|kind| {
            let stats = match kind {
                EstimatorKind::Reinforce => measure_stream(n * v, None, mc_samples, seed, |s| {
                    let mut state = ReinforceState::new(0.9, 1.0, false);
                    let (g, _) = crate::estimators::reinforce_gradient(
                        &z,
                        n,
                        v,
                        &|p| hard_teacher_forced_loss(w, p, target).expect("finite hard loss"),
                        &mut state,
                        1,
                        s,
                    )
                    .expect("finite hard loss");
                    g
                }),
                EstimatorKind::Gs(temp) => {
                    measure_stream(n * v, None, mc_samples, seed, gs_sampler(*temp, false))
                }
                EstimatorKind::StGs(temp) => {
                    measure_stream(n * v, None, mc_samples, seed, gs_sampler(*temp, true))
                }
                EstimatorKind::None => panic!("no sampling estimator to measure"),
            };
            (*kind, stats)
        })
        .collect()
}

/// The end-to-end desk benchmark: train the toy checkpoint, build the ranked
/// dataset, and return both. Shared by the command-line harness defaults and
/// the acceptance suite.
pub struct DeskBench {
    pub weights: LmWeights,
    pub targets: Vec<TargetRecord>,
}

pub fn desk_bench(seed: u64) -> DeskBench {
    let cfg = crate::lm::LmConfig::toy();
    let chain = crate::lm::BigramChain::new(&cfg, seed);
    let corpus = chain.sample_corpus(4096, 33, seed);
    let opts = crate::lm::TrainOptions { steps: 3000, seed, ..Default::default() };
    let (weights, _) = crate::lm::train_tiny_lm(cfg, &corpus, &opts).expect("toy training");
    let targets = crate::targets::build_eval_dataset(&weights, &[1, 6, 11, 16, 21], 5, 6, 0.25, seed)
        .expect("dataset generation");
    DeskBench { weights, targets }
}

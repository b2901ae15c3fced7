//! Command-line harness wiring the toolkit end to end: checkpoint training,
//! dataset generation, inversion sweeps, gradient statistics, and report
//! emission.
//!
//! Exit codes: 0 success, 1 usage error, 2 numeric abort in at least one run,
//! 3 i/o failure.

use clap::error::ErrorKind;
use clap::{ArgAction, Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use softlm_core::experiment::{
    default_estimator_set, grad_stats_csv, run_grad_stats_dlm, run_grad_stats_toy, run_sweep,
    write_sweep_outputs, SweepConfig,
};
use softlm_core::inverter::{InitStrategy, Method, ReinforceParams, SodaParams};
use softlm_core::lm::{train_tiny_lm, BigramChain, LmConfig, LmWeights, TrainOptions};
use softlm_core::metrics::{aggregate, AggregateRow, EvalRecord, AGGREGATE_CSV_HEADER};
use softlm_core::targets::{build_eval_dataset, read_dataset, write_dataset};
use softlm_core::ToyLookupProblem;

mod plot;

#[derive(Parser)]
#[command(
    name = "softlm",
    about = "Invert a small frozen language model by gradient descent through its differentiable relaxation",
    version
)]
struct Cli {
    /// Output root (overrides the SOFTLM_OUT environment variable).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or just initialize) the tiny model and write a checkpoint.
    TrainLm(TrainArgs),
    /// Generate the difficulty-ranked target dataset from a checkpoint.
    GenTargets(GenTargetsArgs),
    /// Run inversion sweeps over methods, seeds, and targets.
    Invert(InvertArgs),
    /// Measure gradient-estimator bias and variance.
    GradStats(GradStatsArgs),
    /// Aggregate evaluation records into a table and a plot.
    Report(ReportArgs),
}

#[derive(Args)]
#[command(rename_all = "snake_case")]
struct TrainArgs {
    /// Checkpoint output path (default: <out>/checkpoint.json).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    vocab_size: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    n_layers: usize,
    #[arg(long, default_value_t = 2)]
    n_heads: usize,
    #[arg(long, default_value_t = 64)]
    d_ff: usize,
    #[arg(long, default_value_t = 128)]
    max_seq_len: usize,
    /// Sequences in the synthetic training corpus.
    #[arg(long, default_value_t = 4096)]
    corpus_seqs: usize,
    /// Tokens per corpus sequence (BoS included).
    #[arg(long, default_value_t = 33)]
    corpus_len: usize,
    #[arg(long, default_value_t = 3e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args)]
#[command(rename_all = "snake_case")]
struct GenTargetsArgs {
    /// Checkpoint to generate from (default: <out>/checkpoint.json).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset output path (default: <out>/targets.jsonl).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Difficulty ranks, one bucket each.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 6, 11, 16, 21])]
    difficulties: Vec<usize>,
    /// Targets per difficulty bucket.
    #[arg(long, default_value_t = 5)]
    per_k: usize,
    /// Target length M.
    #[arg(long, default_value_t = 6)]
    target_len: usize,
    /// Rank-noise standard deviation.
    #[arg(long, default_value_t = 0.25)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
#[command(rename_all = "snake_case")]
struct InvertArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// dlmi | dlmi-no-tf | gbda | soda | reinforce | all
    #[arg(long, default_value = "dlmi")]
    method: String,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0, 1, 2, 3, 4])]
    seeds: Vec<u64>,
    /// Optimization steps per run.
    #[arg(long, default_value_t = 2048)]
    epochs: usize,
    /// Prompt length N to optimize.
    #[arg(long, default_value_t = 8)]
    seq_len: usize,
    /// Fixed τ (gbda/soda) or initial τ0 (dlmi); per-method default if unset.
    #[arg(long)]
    temperature: Option<f64>,
    /// One learnable temperature per prompt position (dlmi).
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    decouple_learnable_temp: bool,
    /// Condition the forward on the true targets (dlmi).
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    teacher_forcing: bool,
    #[arg(long, default_value_t = 8)]
    num_samples: usize,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Effective-temperature floor ε.
    #[arg(long, default_value_t = 1e-2)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.9)]
    reinforce_baseline_beta: f64,
    #[arg(long, default_value_t = 1.0)]
    reinforce_reward_scale: f64,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    reinforce_use_baseline: bool,
    #[arg(long, default_value_t = 0.9)]
    soda_beta1: f64,
    #[arg(long, default_value_t = 0.995)]
    soda_beta2: f64,
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    soda_bias_correction: bool,
    #[arg(long, default_value_t = 0.98)]
    soda_decay_rate: f64,
    #[arg(long, default_value_t = 1500)]
    soda_reinit_epoch: usize,
    #[arg(long, default_value_t = 50)]
    soda_reset_epoch: usize,
    /// zeros | gaussian (soda).
    #[arg(long, default_value = "zeros")]
    init_strategy: String,
    /// Any-time evaluation budgets (steps).
    #[arg(long, value_delimiter = ',', default_values_t = vec![256, 2048])]
    budgets: Vec<usize>,
    /// Log the greedy LCS every this many steps (0 = off).
    #[arg(long, default_value_t = 0)]
    eval_every: usize,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    parallelism: usize,
    /// Subdirectory for this sweep's outputs (default: <out>/invert).
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
#[command(rename_all = "snake_case")]
struct GradStatsArgs {
    /// toy (oracle bias + variance) | dlm (variance only, full pipeline).
    #[arg(long, default_value = "toy")]
    setting: String,
    /// Prompt length N of the measured logits.
    #[arg(long, default_value_t = 2)]
    seq_len: usize,
    /// Vocabulary of the toy lookup problem.
    #[arg(long, default_value_t = 5)]
    vocab: usize,
    #[arg(long, default_value_t = 200_000)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint for the dlm setting (random micro model if unset).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Target length for the dlm setting.
    #[arg(long, default_value_t = 3)]
    target_len: usize,
    /// Output CSV (default: <out>/grad_stats.csv).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
#[command(rename_all = "snake_case")]
struct ReportArgs {
    /// Record files to aggregate (records.csv from invert runs).
    #[arg(long, required = true, num_args = 1..)]
    records: Vec<PathBuf>,
    /// Aggregate table output (default: <out>/report.csv).
    #[arg(long)]
    table: Option<PathBuf>,
    /// Plot output, SVG (default: <out>/report.svg).
    #[arg(long)]
    plot: Option<PathBuf>,
}

enum CliError {
    Usage(String),
    Io(String),
    NumericAbort,
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn out_root(cli_out: &Option<PathBuf>) -> PathBuf {
    cli_out
        .clone()
        .or_else(|| std::env::var_os("SOFTLM_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("softlm-out"))
}

fn load_checkpoint(path: &Path) -> Result<LmWeights, CliError> {
    LmWeights::load(path).map_err(|e| CliError::Io(format!("loading checkpoint {}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are not usage errors
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let out = out_root(&cli.out);
    let result = match &cli.command {
        Command::TrainLm(args) => cmd_train_lm(&out, args),
        Command::GenTargets(args) => cmd_gen_targets(&out, args),
        Command::Invert(args) => cmd_invert(&out, args),
        Command::GradStats(args) => cmd_grad_stats(&out, args),
        Command::Report(args) => cmd_report(&out, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::NumericAbort) => {
            eprintln!("error: at least one run aborted on a non-finite loss");
            ExitCode::from(2)
        }
        Err(CliError::Io(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn cmd_train_lm(out: &Path, args: &TrainArgs) -> Result<(), CliError> {
    let config = LmConfig {
        vocab_size: args.vocab_size,
        d_model: args.d_model,
        n_layers: args.n_layers,
        n_heads: args.n_heads,
        d_ff: args.d_ff,
        max_seq_len: args.max_seq_len,
        bos_token: 0,
        eos_token: 1,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let chain = BigramChain::new(&config, args.seed);
    let corpus = chain.sample_corpus(args.corpus_seqs, args.corpus_len, args.seed);
    let opts = TrainOptions {
        steps: args.steps,
        batch_size: args.batch_size,
        learning_rate: args.learning_rate,
        seed: args.seed,
    };
    let (weights, losses) =
        train_tiny_lm(config.clone(), &corpus, &opts).map_err(|e| CliError::Usage(e.to_string()))?;
    let heldout = chain.sample_corpus(64, args.corpus_len, args.seed.wrapping_add(0xBEEF));
    let mean_ppl = heldout
        .iter()
        .map(|seq| weights.sequence_perplexity(&seq[1..]).unwrap_or(f64::INFINITY))
        .sum::<f64>()
        / heldout.len() as f64;
    std::fs::create_dir_all(out)?;
    let path = args.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.json"));
    weights.save(&path).map_err(|e| CliError::Io(e.to_string()))?;
    println!("checkpoint: {}", path.display());
    println!("weights_hash: {}", weights.content_hash());
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("train_loss: {first:.4} -> {last:.4} over {} steps", losses.len());
    }
    println!("heldout_ppl: {mean_ppl:.3} (uniform bound {})", config.vocab_size);
    Ok(())
}

fn cmd_gen_targets(out: &Path, args: &GenTargetsArgs) -> Result<(), CliError> {
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.json"));
    let weights = load_checkpoint(&ckpt)?;
    for &k in &args.difficulties {
        if k == 0 || k > weights.config.vocab_size {
            return Err(CliError::Usage(format!(
                "difficulty {k} outside [1, {}]",
                weights.config.vocab_size
            )));
        }
    }
    let records = build_eval_dataset(
        &weights,
        &args.difficulties,
        args.per_k,
        args.target_len,
        args.sigma,
        args.seed,
    )
    .map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::create_dir_all(out)?;
    let path = args.dataset.clone().unwrap_or_else(|| out.join("targets.jsonl"));
    write_dataset(&path, &records).map_err(|e| CliError::Io(e.to_string()))?;
    println!("dataset: {} ({} targets)", path.display(), records.len());
    for &k in &args.difficulties {
        let bucket: Vec<&softlm_core::TargetRecord> = records.iter().filter(|r| r.k == k).collect();
        let ppl = bucket.iter().map(|r| r.perplexity).sum::<f64>() / bucket.len() as f64;
        let mean_rank = bucket
            .iter()
            .flat_map(|r| r.realized_ranks.iter())
            .map(|&r| r as f64)
            .sum::<f64>()
            / bucket.iter().map(|r| r.realized_ranks.len()).sum::<usize>().max(1) as f64;
        println!("k={k}: mean_ppl {ppl:.3}, mean_realized_rank {mean_rank:.2}");
    }
    Ok(())
}

fn parse_methods(args: &InvertArgs) -> Result<Vec<Method>, CliError> {
    let dlmi = Method::Dlmi {
        tau0: args.temperature.unwrap_or(100.0),
        decouple_temperature: args.decouple_learnable_temp,
        teacher_forcing: args.teacher_forcing,
    };
    let gbda = Method::Gbda { tau: args.temperature.unwrap_or(1.0) };
    let soda = Method::Soda(SodaParams {
        tau: args.temperature.unwrap_or(0.05),
        beta1: args.soda_beta1,
        beta2: args.soda_beta2,
        bias_correction: args.soda_bias_correction,
        decay_rate: args.soda_decay_rate,
        reinit_epoch: args.soda_reinit_epoch,
        reset_epoch: args.soda_reset_epoch,
        init_strategy: match args.init_strategy.as_str() {
            "zeros" => InitStrategy::Zeros,
            "gaussian" => InitStrategy::Gaussian,
            other => return Err(CliError::Usage(format!("unknown init_strategy '{other}'"))),
        },
    });
    let reinforce = Method::Reinforce(ReinforceParams {
        baseline_beta: args.reinforce_baseline_beta,
        reward_scale: args.reinforce_reward_scale,
        use_baseline: args.reinforce_use_baseline,
    });
    Ok(match args.method.as_str() {
        "dlmi" => vec![dlmi],
        "dlmi-no-tf" => vec![Method::Dlmi {
            tau0: args.temperature.unwrap_or(100.0),
            decouple_temperature: args.decouple_learnable_temp,
            teacher_forcing: false,
        }],
        "gbda" => vec![gbda],
        "soda" => vec![soda],
        "reinforce" => vec![reinforce],
        // canonical per-method temperatures for the combined sweep
        "all" => vec![
            Method::dlmi(args.temperature.unwrap_or(100.0)),
            Method::dlmi_no_tf(args.temperature.unwrap_or(100.0)),
            Method::Gbda { tau: 1.0 },
            Method::Soda(SodaParams::default()),
            reinforce,
        ],
        other => return Err(CliError::Usage(format!("unknown method '{other}'"))),
    })
}

fn cmd_invert(out: &Path, args: &InvertArgs) -> Result<(), CliError> {
    let methods = parse_methods(args)?;
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.json"));
    let ds = args.dataset.clone().unwrap_or_else(|| out.join("targets.jsonl"));
    let weights = load_checkpoint(&ckpt)?;
    let targets =
        read_dataset(&ds).map_err(|e| CliError::Io(format!("loading dataset {}: {e}", ds.display())))?;
    if targets.is_empty() {
        return Err(CliError::Usage(format!("dataset {} is empty", ds.display())));
    }
    let mut cfg = SweepConfig::new(methods, args.seeds.clone(), args.seq_len, args.epochs);
    cfg.budgets = args.budgets.clone();
    cfg.num_samples = args.num_samples;
    cfg.epsilon = args.epsilon;
    cfg.learning_rate = args.learning_rate;
    cfg.eval_every = args.eval_every;
    cfg.parallelism = args.parallelism;

    let result = run_sweep(&weights, &targets, &cfg);
    let run_dir = args.run_dir.clone().unwrap_or_else(|| out.join("invert"));
    write_sweep_outputs(&run_dir, &weights, &cfg, &targets, &result)?;
    println!("records: {} ({} runs)", run_dir.join("records.csv").display(), result.runs.len());
    for row in aggregate(&result.records) {
        println!(
            "{} k={} @{}: lcs {:.3} ± {:.3} (n={})",
            row.method, row.k, row.budget, row.mean_lcs, row.stderr_lcs, row.n
        );
    }
    if result.any_aborted() {
        return Err(CliError::NumericAbort);
    }
    Ok(())
}

fn cmd_grad_stats(out: &Path, args: &GradStatsArgs) -> Result<(), CliError> {
    let set = default_estimator_set();
    let rows = match args.setting.as_str() {
        "toy" => {
            let problem = ToyLookupProblem::new(args.seq_len, args.vocab, args.seed)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            run_grad_stats_toy(&problem, &set, args.mc_samples, args.seed)
        }
        "dlm" => {
            let weights = match &args.checkpoint {
                Some(path) => load_checkpoint(path)?,
                None => LmWeights::init(LmConfig::micro(16), args.seed)
                    .map_err(|e| CliError::Usage(e.to_string()))?,
            };
            let target: Vec<usize> =
                (0..args.target_len).map(|i| (2 + i) % weights.config.vocab_size).collect();
            run_grad_stats_dlm(&weights, &target, args.seq_len, &set, args.mc_samples, args.seed)
        }
        other => return Err(CliError::Usage(format!("unknown setting '{other}'"))),
    };
    std::fs::create_dir_all(out)?;
    let path = args.csv.clone().unwrap_or_else(|| out.join("grad_stats.csv"));
    std::fs::write(&path, grad_stats_csv(&rows, args.seed))?;
    println!("grad stats: {}", path.display());
    for (kind, stats) in &rows {
        println!(
            "{}: max_bias {} max_variance {:.3e}",
            kind.id(),
            if stats.max_bias.is_nan() { "n/a".into() } else { format!("{:.3e}", stats.max_bias) },
            stats.max_variance
        );
    }
    Ok(())
}

fn cmd_report(out: &Path, args: &ReportArgs) -> Result<(), CliError> {
    let mut records: Vec<EvalRecord> = Vec::new();
    for path in &args.records {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
        records.extend(
            EvalRecord::read_csv(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?,
        );
    }
    if records.is_empty() {
        return Err(CliError::Io("no evaluation records found; nothing to report".into()));
    }
    let rows: Vec<AggregateRow> = aggregate(&records);
    std::fs::create_dir_all(out)?;
    let table_path = args.table.clone().unwrap_or_else(|| out.join("report.csv"));
    let mut table = String::from(AGGREGATE_CSV_HEADER);
    table.push('\n');
    for row in &rows {
        table.push_str(&row.to_csv_row());
        table.push('\n');
    }
    std::fs::write(&table_path, table)?;
    let plot_path = args.plot.clone().unwrap_or_else(|| out.join("report.svg"));
    plot::lcs_vs_difficulty(&plot_path, &rows).map_err(|e| CliError::Io(e.to_string()))?;
    println!("table: {}", table_path.display());
    println!("plot:  {}", plot_path.display());
    for row in &rows {
        println!(
            "{} k={} @{}: lcs {:.3} ± {:.3} (n={})",
            row.method, row.k, row.budget, row.mean_lcs, row.stderr_lcs, row.n
        );
    }
    Ok(())
}

//! Evaluation metrics: token-level longest-common-subsequence ratio against
//! greedily decoded outputs, the token-overlap cheating guard, per-run
//! evaluation records with a fixed CSV schema, and mean/standard-error
//! aggregation for reporting.

use thiserror::Error;

use crate::lm::{LmError, LmWeights, Token};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric requires a non-empty target sequence")]
    EmptyTarget,
    #[error("malformed record line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Lm(#[from] LmError),
}

/// Length of the longest common subsequence (classic dynamic program).
pub fn lcs_length(a: &[Token], b: &[Token]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &av in a {
        for (j, &bv) in b.iter().enumerate() {
            cur[j + 1] = if av == bv { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS length of `decoded` against `target`, divided by the target length.
pub fn lcs_ratio(decoded: &[Token], target: &[Token]) -> Result<f64, MetricsError> {
    if target.is_empty() {
        return Err(MetricsError::EmptyTarget);
    }
    Ok(lcs_length(decoded, target) as f64 / target.len() as f64)
}

/// Fraction of the distinct target tokens that appear anywhere in the
/// prompt: the guard against prompts that simply quote the target.
pub fn token_overlap_rate(prompt: &[Token], target: &[Token]) -> Result<f64, MetricsError> {
    if target.is_empty() {
        return Err(MetricsError::EmptyTarget);
    }
    let mut distinct: Vec<Token> = target.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let present = distinct.iter().filter(|t| prompt.contains(t)).count();
    Ok(present as f64 / distinct.len() as f64)
}

/// One evaluated inversion run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub method: String,
    pub k: usize,
    pub seed: u64,
    pub budget: usize,
    pub lcs_ratio: f64,
    pub overlap_rate: f64,
    pub prompt_ppl: f64,
    pub prompt_tokens: Vec<Token>,
    pub greedy_tokens: Vec<Token>,
}

pub const EVAL_CSV_HEADER: &str =
    "method,k,seed,budget,lcs_ratio,overlap_rate,prompt_ppl,prompt_tokens,greedy_tokens";

fn join_tokens(tokens: &[Token]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join("-")
}

fn parse_tokens(s: &str) -> Option<Vec<Token>> {
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split('-').map(|p| p.parse().ok()).collect()
}

impl EvalRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.method,
            self.k,
            self.seed,
            self.budget,
            self.lcs_ratio,
            self.overlap_rate,
            self.prompt_ppl,
            join_tokens(&self.prompt_tokens),
            join_tokens(&self.greedy_tokens)
        )
    }

    pub fn from_csv_row(row: &str, line: usize) -> Result<Self, MetricsError> {
        let err = |reason: &str| MetricsError::Parse { line, reason: reason.into() };
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 9 {
            return Err(err(&format!("expected 9 fields, got {}", fields.len())));
        }
        Ok(EvalRecord {
            method: fields[0].to_string(),
            k: fields[1].parse().map_err(|_| err("bad k"))?,
            seed: fields[2].parse().map_err(|_| err("bad seed"))?,
            budget: fields[3].parse().map_err(|_| err("bad budget"))?,
            lcs_ratio: fields[4].parse().map_err(|_| err("bad lcs_ratio"))?,
            overlap_rate: fields[5].parse().map_err(|_| err("bad overlap_rate"))?,
            prompt_ppl: fields[6].parse().map_err(|_| err("bad prompt_ppl"))?,
            prompt_tokens: parse_tokens(fields[7]).ok_or_else(|| err("bad prompt_tokens"))?,
            greedy_tokens: parse_tokens(fields[8]).ok_or_else(|| err("bad greedy_tokens"))?,
        })
    }

    pub fn write_csv(records: &[EvalRecord]) -> String {
        let mut out = String::from(EVAL_CSV_HEADER);
        out.push('\n');
        for r in records {
            out.push_str(&r.to_csv_row());
            out.push('\n');
        }
        out
    }

    pub fn read_csv(text: &str) -> Result<Vec<EvalRecord>, MetricsError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != EVAL_CSV_HEADER {
                    return Err(MetricsError::Parse { line: 1, reason: "bad header".into() });
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            records.push(EvalRecord::from_csv_row(line, i + 1)?);
        }
        Ok(records)
    }
}

/// Evaluates optimized prompt logits against a target: discretizes the
/// prompt, greedy-decodes the frozen model for `target.len()` tokens, and
/// fills every record field.
pub fn evaluate_run(
    w: &LmWeights,
    final_z: &[f64],
    target: &[Token],
    k: usize,
    method: &str,
    seed: u64,
    budget: usize,
) -> Result<EvalRecord, MetricsError> {
    if target.is_empty() {
        return Err(MetricsError::EmptyTarget);
    }
    let v = w.config.vocab_size;
    assert_eq!(final_z.len() % v, 0, "evaluate_run: logits not a multiple of vocab size");
    let prompt = crate::inverter::extract_prompt(final_z, v);
    let greedy = w.greedy_decode(&prompt, target.len())?;
    Ok(EvalRecord {
        method: method.to_string(),
        k,
        seed,
        budget,
        lcs_ratio: lcs_ratio(&greedy, target)?,
        overlap_rate: token_overlap_rate(&prompt, target)?,
        prompt_ppl: w.sequence_perplexity(&prompt)?,
        prompt_tokens: prompt,
        greedy_tokens: greedy,
    })
}

/// One aggregation cell: mean ± standard error of the LCS ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub k: usize,
    pub budget: usize,
    pub mean_lcs: f64,
    pub stderr_lcs: f64,
    pub n: usize,
}

pub const AGGREGATE_CSV_HEADER: &str = "method,k,budget,mean_lcs,stderr_lcs,n";

impl AggregateRow {
    pub fn to_csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.method, self.k, self.budget, self.mean_lcs, self.stderr_lcs, self.n)
    }
}

/// Groups records by (method, k, budget) and reports mean and standard error
/// of the LCS ratio per cell. Cells are emitted in sorted order; empty cells
/// simply do not appear.
pub fn aggregate(records: &[EvalRecord]) -> Vec<AggregateRow> {
    use std::collections::BTreeMap;
    let mut cells: BTreeMap<(String, usize, usize), Vec<f64>> = BTreeMap::new();
    for r in records {
        cells.entry((r.method.clone(), r.k, r.budget)).or_default().push(r.lcs_ratio);
    }
    cells
        .into_iter()
        .map(|((method, k, budget), vals)| {
            let n = vals.len();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let stderr = if n < 2 {
                0.0
            } else {
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
                (var / n as f64).sqrt()
            };
            AggregateRow { method, k, budget, mean_lcs: mean, stderr_lcs: stderr, n }
        })
        .collect()
}

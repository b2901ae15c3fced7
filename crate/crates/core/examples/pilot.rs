use softlm_core::experiment::*;
use softlm_core::inverter::*;
use softlm_core::lm::*;
use softlm_core::metrics::lcs_length;

fn coord_descent_lcs(w: &LmWeights, target: &[usize], n: usize) -> f64 {
    let mut best_loss = f64::INFINITY;
    let mut best_prompt = vec![0usize; n];
    for start in 0..4u64 {
        let mut rng = softlm_core::Rng::new(start * 7 + 1);
        let mut prompt: Vec<usize> = (0..n).map(|_| rng.below(w.config.vocab_size)).collect();
        let mut loss = hard_teacher_forced_loss(w, &prompt, target).unwrap();
        for _ in 0..6 {
            let mut improved = false;
            for pos in 0..n {
                let mut best_tok = prompt[pos];
                for tok in 0..w.config.vocab_size {
                    prompt[pos] = tok;
                    let l = hard_teacher_forced_loss(w, &prompt, target).unwrap();
                    if l < loss { loss = l; best_tok = tok; improved = true; }
                }
                prompt[pos] = best_tok;
            }
            if !improved { break; }
        }
        if loss < best_loss { best_loss = loss; best_prompt = prompt; }
    }
    let g = w.greedy_decode(&best_prompt, target.len()).unwrap();
    lcs_length(&g, target) as f64 / target.len() as f64
}

fn main() {
    let bench = desk_bench(0);
    let w = &bench.weights;
    for k in [1usize, 6, 11, 16, 21] {
        let bucket: Vec<_> = bench.targets.iter().filter(|t| t.k == k).collect();
        let cd: f64 = bucket.iter().map(|t| coord_descent_lcs(w, &t.tokens, 8)).sum::<f64>() / 5.0;
        let ppl: f64 = bucket.iter().map(|t| t.perplexity).sum::<f64>() / 5.0;
        println!("k={k}: CD {cd:.2} ppl {ppl:.1}");
    }
}

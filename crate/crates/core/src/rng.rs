//! Seeded pseudo-random streams (xoshiro256**) with deterministic substream
//! derivation, so every run, sample and Monte Carlo chunk can own an
//! independent generator reproducible from integer labels alone.

/// Clamp applied to uniform draws before the double-log Gumbel transform.
const GUMBEL_U_CLAMP: f64 = 1e-12;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes an arbitrary list of integer labels into a single stream seed.
///
/// Used to derive independent substreams from `(seed, step, sample)`-style
/// coordinates without any shared mutable state.
pub fn stream_seed(labels: &[u64]) -> u64 {
    let mut acc = 0x243f_6a88_85a3_08d3u64; // arbitrary odd constant
    for &l in labels {
        let mut s = acc ^ l.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        acc = splitmix64(&mut s);
    }
    acc
}

/// xoshiro256** generator.
#[derive(Clone, Debug)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s }
    }

    /// Generator for a labelled substream of `seed`.
    pub fn substream(seed: u64, labels: &[u64]) -> Self {
        let mut all = Vec::with_capacity(labels.len() + 1);
        all.push(seed);
        all.extend_from_slice(labels);
        Rng::new(stream_seed(&all))
    }

    pub fn next_u64(&mut self) -> u64 {
        let r = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        r
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform() * n as f64) as usize % n
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(GUMBEL_U_CLAMP);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Standard Gumbel(0,1) draw, `-ln(-ln(u))` with `u` clamped away from
    /// {0, 1} so the result is always finite.
    pub fn gumbel(&mut self) -> f64 {
        let u = self.uniform().clamp(GUMBEL_U_CLAMP, 1.0 - GUMBEL_U_CLAMP);
        -(-u.ln()).ln()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }

    pub fn fill_gumbel(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.gumbel();
        }
    }

    /// Index draw from an explicit probability row (assumed to sum to ~1).
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let dart = self.uniform();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if dart < acc {
                return i;
            }
        }
        probs.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn substreams_differ_per_label() {
        let mut a = Rng::substream(7, &[1, 0]);
        let mut b = Rng::substream(7, &[1, 1]);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut rng = Rng::new(3);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn gumbel_draws_finite() {
        let mut rng = Rng::new(11);
        for _ in 0..10_000 {
            assert!(rng.gumbel().is_finite());
        }
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut rng = Rng::new(5);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let x = rng.normal();
            sum += x;
            sum2 += x * x;
        }
        let mean = sum / n as f64;
        let var = sum2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn categorical_matches_weights() {
        let mut rng = Rng::new(9);
        let probs = [0.1, 0.6, 0.3];
        let mut counts = [0usize; 3];
        let n = 200_000;
        for _ in 0..n {
            counts[rng.categorical(&probs)] += 1;
        }
        for (c, p) in counts.iter().zip(probs.iter()) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.01);
        }
    }
}

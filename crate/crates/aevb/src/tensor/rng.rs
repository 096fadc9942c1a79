//! Seeded random number generation with a counter-based core.
//!
//! The generator is SplitMix64: the state advances by a fixed odd constant
//! and each output is a strong bit mix of the state. Because every draw is
//! a pure function of `seed + k * GAMMA`, the stream for a given seed is
//! identical across runs and platforms — there is no global state, no
//! locking, and cloning the generator snapshots the stream position (which
//! the gradient checks use to freeze noise between re-evaluations).
//!
//! All floating-point transforms (uniform, Box-Muller normal, Gumbel) are
//! built from the raw 64-bit stream with plain IEEE arithmetic.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct SeededRng {
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> SeededRng {
        SeededRng { state: mix(seed.wrapping_add(GAMMA)) }
    }

    /// Derives an independent stream keyed by `tag` without advancing this
    /// one. Used to give data generation, training noise, and evaluation
    /// noise disjoint streams from one user-facing seed.
    pub fn derive(&self, tag: u64) -> SeededRng {
        SeededRng { state: mix(self.state ^ mix(tag.wrapping_add(GAMMA))) }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
    }

    /// Uniform draw strictly inside (0, 1): the top 53 bits are centered
    /// in their bucket, so 0 and 1 are unreachable and logs are safe.
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform draw on [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * ((self.next_u64() >> 11) as f64) * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Standard normal via Box-Muller (one value per pair of uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Standard Gumbel draw, -ln(-ln U).
    pub fn gumbel(&mut self) -> f64 {
        -(-self.uniform().ln()).ln()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Chooses an index with probability proportional to `probs`.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let total: f64 = probs.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &p) in probs.iter().enumerate() {
            u -= p;
            if u <= 0.0 {
                return i;
            }
        }
        probs.len() - 1
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}

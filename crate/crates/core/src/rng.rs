//! Counter-based deterministic random streams.
//!
//! Every stochastic operation in this crate takes an explicit [`Stream`].
//! A stream is a pure function of (key, counter), so replaying a run with
//! the same seed reproduces every draw bit-for-bit, independent of call
//! interleaving across components: each component derives its own child
//! stream instead of sharing one.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic random stream, fully determined by a 64-bit key.
#[derive(Debug, Clone)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream { key: mix(seed ^ GOLDEN), counter: 0 }
    }

    /// Child stream keyed off this stream's key and a tag. Deriving does not
    /// advance the parent counter, so derivations commute with draws.
    pub fn derive(&self, tag: u64) -> Stream {
        Stream { key: mix(self.key ^ mix(tag.wrapping_add(GOLDEN))), counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        let z = self.key.wrapping_add(self.counter.wrapping_add(1).wrapping_mul(GOLDEN));
        self.counter += 1;
        mix(z)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn log_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo > 0.0 && hi >= lo);
        self.uniform(lo.ln(), hi.ln()).exp()
    }

    /// Standard normal via Box-Muller (two uniforms per draw, no caching).
    pub fn normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Key of this stream; used only for diagnostics.
    pub fn key(&self) -> u64 {
        self.key
    }
}

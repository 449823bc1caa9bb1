//! Deterministic random streams: splitmix64 for uniforms, Box–Muller for
//! normals. The generator is pinned (not delegated to an external crate) so
//! that a given seed reproduces bit-identical parameters and datasets across
//! builds and platforms.

/// splitmix64 stream. One `u64` of state, full 2^64 period.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in [lo, hi).
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }
}

/// Standard-normal stream: Box–Muller over splitmix64 uniforms.
/// Pairs are generated together; the sine half is cached.
#[derive(Debug, Clone)]
pub struct Gaussian {
    rng: SplitMix64,
    spare: Option<f64>,
}

impl Gaussian {
    pub fn new(seed: u64) -> Self {
        Gaussian { rng: SplitMix64::new(seed), spare: None }
    }

    pub fn sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] so ln(u1) is finite.
        let u1 = 1.0 - self.rng.next_f64();
        let u2 = self.rng.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Fold `tags` into `seed`, producing an independent stream seed.
/// Used to give every (class, sample) pair its own deterministic stream.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut out = SplitMix64::new(seed).next_u64();
    for &t in tags {
        out = SplitMix64::new(out ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15)).next_u64();
    }
    out
}

/// In-place Fisher–Yates shuffle driven by the given stream.
pub fn shuffle<T>(rng: &mut SplitMix64, xs: &mut [T]) {
    for i in (1..xs.len()).rev() {
        let j = rng.next_below(i + 1);
        xs.swap(i, j);
    }
}

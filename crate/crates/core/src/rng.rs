//! Portable pseudo-random streams.
//!
//! Both generators are fully specified here so that cohorts and training
//! orders can be reproduced bit-for-bit by other implementations.
//!
//! * [`SplitMix64`] drives synthetic data. State is a single `u64`; each call
//!   adds `0x9E3779B97F4A7C15` to the state and returns the SplitMix64 mix of
//!   the new state. Sub-streams are derived with [`SplitMix64::derive`].
//! * [`Lcg64`] drives fold assignment and per-epoch shuffling. State update is
//!   `s = s * 6364136223846793005 + 1442695040888963407 (mod 2^64)`, output is
//!   the high 32 bits of the new state.
//!
//! Uniform reals use the top 53 bits: `(x >> 11) * 2^-53`, giving `[0, 1)`.
//! Normals use the cosine branch of Box-Muller with `u1` taken from `(0, 1]`.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Independent stream number `stream` of the generator seeded with `seed`:
    /// `SplitMix64::new(mix64(seed + (stream + 1) * GOLDEN_GAMMA))`.
    pub fn derive(seed: u64, stream: u64) -> Self {
        let s = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA));
        Self::new(mix64(s))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` via 64x64 -> 128 multiply-high.
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.standard_normal()
    }
}

#[derive(Debug, Clone)]
pub struct Lcg64 {
    state: u64,
}

impl Lcg64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u32(&mut self) -> u32 {
        self.state = self
            .state
            .wrapping_mul(6_364_136_223_846_793_005)
            .wrapping_add(1_442_695_040_888_963_407);
        (self.state >> 32) as u32
    }

    /// Integer in `[0, n)` as `(next_u32 * n) >> 32`.
    pub fn below(&mut self, n: u32) -> u32 {
        ((self.next_u32() as u64 * n as u64) >> 32) as u32
    }

    /// Fisher-Yates from the back: for `i = len-1 ..= 1`, swap `i` with `below(i+1)`.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u32 + 1) as usize;
            items.swap(i, j);
        }
    }
}

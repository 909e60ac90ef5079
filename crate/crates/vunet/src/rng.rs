//! Seeded random number generation.
//!
//! All randomness in the crate flows from a single `u64` seed. Sub-streams
//! are derived by hashing `(seed, purpose)` or `(seed, purpose, index)`, so
//! every consumer gets an independent, reproducible stream regardless of
//! evaluation order or thread scheduling. The generator is xoshiro256++
//! seeded through splitmix64; no external RNG crate is used so that the
//! bit streams are pinned by this crate alone.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(init: u64, bytes: &[u8]) -> u64 {
    let mut h = init;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Stable 64-bit hash of a seed plus an arbitrary purpose string.
pub fn stable_hash(seed: u64, purpose: &str) -> u64 {
    let h = fnv1a(FNV_OFFSET, &seed.to_le_bytes());
    fnv1a(h, purpose.as_bytes())
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic xoshiro256++ stream.
#[derive(Clone, Debug)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        let mut st = seed;
        let mut s = [0u64; 4];
        for slot in s.iter_mut() {
            *slot = splitmix64(&mut st);
        }
        // All-zero state is invalid for xoshiro; splitmix cannot produce it
        // for four consecutive outputs, but guard anyway.
        if s.iter().all(|&x| x == 0) {
            s[0] = 1;
        }
        Rng { s }
    }

    /// Stream dedicated to one purpose, e.g. `derive(seed, "init.params")`.
    pub fn derive(seed: u64, purpose: &str) -> Self {
        Self::from_seed(stable_hash(seed, purpose))
    }

    /// Indexed sub-stream, e.g. one per sample or per training step.
    pub fn derive_indexed(seed: u64, purpose: &str, index: u64) -> Self {
        let h = fnv1a(stable_hash(seed, purpose), &index.to_le_bytes());
        Self::from_seed(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = (self.s[0].wrapping_add(self.s[3]))
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        // Modulo bias is irrelevant at our scales.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn fill_normal<S: crate::tensor::Scalar>(&mut self, out: &mut [S], std: f64) {
        for v in out.iter_mut() {
            *v = S::from_f64(self.normal() * std);
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

//! Deterministic PRNG used for every random draw in the crate.
//!
//! The generator is splitmix64. It is fixed here (and byte-specified in
//! `docs/formats.md`) so that a filter bank is reproducible from
//! `(shape, family, seed)` across runs, platforms and implementations.
//! OS randomness is never consulted.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Sequential deterministic generator. Not `Clone`-shared across threads:
/// one stream, strictly consumed in order.
#[derive(Debug, Clone)]
pub struct PatternRng {
    state: u64,
}

impl PatternRng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Derive a child seed from a base seed and a list of salts.
    /// Used to give each filter bank in a model its own stream.
    pub fn derive(seed: u64, salts: &[u64]) -> u64 {
        let mut rng = PatternRng::new(seed);
        let mut out = rng.next_u64();
        for &s in salts {
            rng.state ^= s;
            out = rng.next_u64();
        }
        out
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform integer on the inclusive range `[lo, hi]` (Lemire, debiased).
    pub fn int_inclusive(&mut self, lo: u32, hi: u32) -> u32 {
        assert!(lo <= hi, "empty range [{lo}, {hi}]");
        let span = (hi - lo) as u64 + 1;
        // Widening-multiply rejection sampling over the full u64 stream.
        let threshold = span.wrapping_neg() % span;
        loop {
            let x = self.next_u64();
            let m = (x as u128) * (span as u128);
            if (m as u64) >= threshold {
                return lo + (m >> 64) as u32;
            }
        }
    }

    /// Uniform pick from an explicit finite set.
    pub fn from_set<T: Copy>(&mut self, set: &[T]) -> T {
        assert!(!set.is_empty());
        set[self.int_inclusive(0, set.len() as u32 - 1) as usize]
    }

    /// Uniform f64 in [0, 1), 53 bits of precision.
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in [-bound, bound).
    pub fn symmetric_f64(&mut self, bound: f64) -> f64 {
        (self.unit_f64() * 2.0 - 1.0) * bound
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.unit_f64() < p
    }

    /// Fisher-Yates shuffle, consuming one draw per swap.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.int_inclusive(0, i as u32) as usize;
            items.swap(i, j);
        }
    }
}

//! Seeded, splittable random source with a serialisable position.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Deterministic generator: identical seed and call sequence give identical output.
#[derive(Clone, Debug)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
}

/// Saved position of a [`RandomSource`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, as a decimal string (it is 128-bit).
    pub word_pos: String,
}

/// SplitMix64 finaliser, used to derive independent child seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a labelled sub-task. Does not advance `self`.
    pub fn split(&self, label: u64) -> RandomSource {
        RandomSource::new(mix64(self.seed ^ mix64(label.wrapping_add(0x5851_F42D_4C95_7F2D))))
    }

    pub fn state(&self) -> RngState {
        RngState { seed: self.seed, word_pos: self.rng.get_word_pos().to_string() }
    }

    pub fn restore(state: &RngState) -> Result<RandomSource, std::num::ParseIntError> {
        let mut r = RandomSource::new(state.seed);
        r.rng.set_word_pos(state.word_pos.parse::<u128>()?);
        Ok(r)
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform index below `n`.
    pub fn below(&mut self, n: usize) -> usize {
        rand::Rng::random_range(&mut self.rng, 0..n)
    }
}

impl RngCore for RandomSource {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_resumable() {
        let mut a = RandomSource::new(7);
        let mut b = RandomSource::new(7);
        let xs: Vec<u64> = (0..10).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..10).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        let saved = a.state();
        let next = a.next_u64();
        assert_eq!(RandomSource::restore(&saved).unwrap().next_u64(), next);
    }

    #[test]
    fn splits_differ() {
        let r = RandomSource::new(1);
        let mut s1 = r.split(1);
        let mut s2 = r.split(2);
        assert_ne!(s1.next_u64(), s2.next_u64());
        assert_ne!(r.split(1).split(2).seed(), r.split(2).seed());
        let u = RandomSource::new(3).uniform();
        assert!((0.0..1.0).contains(&u));
    }
}

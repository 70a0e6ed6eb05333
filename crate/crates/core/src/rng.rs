//! Named, splittable random streams.
//!
//! Every random draw in the crate flows from a [`Stream`]. A stream is a
//! ChaCha8 generator keyed by a 64-bit id; child streams are derived from the
//! parent id and a label without advancing the parent, so the same
//! `(seed, label path)` always replays the same sequence regardless of how
//! work is scheduled across threads.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Stream {
    id: u64,
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        let id = mix64(seed ^ 0x6A09_E667_F3BC_C909);
        Self {
            id,
            rng: ChaCha8Rng::seed_from_u64(id),
        }
    }

    /// Child stream for a string label.
    pub fn derive(&self, label: &str) -> Self {
        self.derive_u64(fnv1a64(label.as_bytes()))
    }

    /// Child stream for a numeric label (run index, round number, ...).
    pub fn derive_u64(&self, label: u64) -> Self {
        let id = mix64(self.id ^ mix64(label.wrapping_add(0x94D0_49BB_1331_11EB)));
        Self {
            id,
            rng: ChaCha8Rng::seed_from_u64(id),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Uniform index in `0..n`. `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Lemire's multiply-shift; bias is below 2^-32 for the sizes used here.
        ((u128::from(self.rng.next_u64()) * n as u128) >> 64) as usize
    }

    /// Uniform `f64` in `[0, 1)` with 53 bits of precision.
    pub fn unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }
}

impl RngCore for Stream {
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

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

//! Deterministic random streams.
//!
//! Every experiment has a single 64-bit master seed. A stream is addressed by
//! `(domain, index)`: the domain (a small tag naming the estimator or pass)
//! is mixed into the master seed with SplitMix64 to form a ChaCha8 key, and
//! the index (usually the replicate number) selects the ChaCha stream under
//! that key. Replicate `i` therefore sees the same numbers no matter how many
//! workers run or in which order replicates are scheduled.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream domains used by the estimators. Kept in one place so two passes
/// never share a key by accident.
pub mod domain {
    /// Unconditioned trees: mean flux and root occupancy share the trees.
    pub const UNCONDITIONED: u64 = 1;
    pub const FLUX_CONDITIONED: u64 = 3;
    pub const FLUX_INF_DIRECT: u64 = 4;
    pub const FLUX_INF_WALK: u64 = 5;
    pub const FLUX_POOL: u64 = 6;
    pub const SPINAL_LHS: u64 = 7;
    pub const SPINAL_RHS: u64 = 8;
    pub const CLI: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A per-worker random stream. Owned, never shared between threads.
#[derive(Clone, Debug)]
pub struct RngStream(ChaCha8Rng);

impl RngStream {
    /// Stream `index` of `domain` under `master`.
    pub fn derive(master: u64, domain: u64, index: u64) -> Self {
        let key = splitmix64(master ^ splitmix64(domain));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(index);
        RngStream(rng)
    }

    /// Convenience for ad-hoc use: stream 0 of a fixed domain.
    pub fn from_seed(seed: u64) -> Self {
        Self::derive(seed, 0, 0)
    }

    /// Uniform draw in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Lemire's nearly-divisionless method, exact.
        let mut m = (self.0.next_u64() as u128) * (n as u128);
        let mut low = m as u64;
        if low < n {
            let threshold = n.wrapping_neg() % n;
            while low < threshold {
                m = (self.0.next_u64() as u128) * (n as u128);
                low = m as u64;
            }
        }
        (m >> 64) as u64
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}

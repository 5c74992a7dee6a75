//! Per-purpose deterministic random streams.
//!
//! Every consumer derives its own ChaCha stream from `(seed, purpose, a, b)`,
//! so turning one consumer on or off never shifts another's draws and results
//! do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Corpus = 2,
    DataOrder = 3,
    Gumbel = 4,
    Prior = 5,
    Posterior = 6,
    Decoding = 7,
    ProxyConcepts = 8,
    BocSampling = 9,
    Mixing = 10,
    Selector = 11,
    Eval = 12,
    Oracle = 13,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Counter-based stream for `(seed, purpose, major, minor)`.
pub fn stream(seed: u64, purpose: Purpose, major: u64, minor: u64) -> Rng {
    let key = splitmix(splitmix(splitmix(seed) ^ purpose as u64) ^ major);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(minor);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, Purpose::Gumbel, 1, 2).gen();
        let b: u64 = stream(7, Purpose::Gumbel, 1, 2).gen();
        let c: u64 = stream(7, Purpose::Gumbel, 1, 3).gen();
        let d: u64 = stream(7, Purpose::Prior, 1, 2).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}

//! Named random streams derived from one root seed.
//!
//! Each stream is a ChaCha8 generator keyed by the root seed and selected by
//! a 64-bit stream id hashed from `(name, index)`. ChaCha is counter-based,
//! so streams never overlap and consuming one leaves the others untouched:
//! changing the number of epochs cannot shift environment randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStreams {
    root: u64,
}

impl RngStreams {
    pub fn new(root: u64) -> Self {
        Self { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    pub fn stream(&self, name: &str, index: u64) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.root);
        rng.set_stream(stream_id(name, index));
        rng
    }

    /// A derived 64-bit seed, for components that take a plain seed.
    pub fn seed(&self, name: &str, index: u64) -> u64 {
        use rand::RngCore;
        self.stream(name, index).next_u64()
    }
}

fn stream_id(name: &str, index: u64) -> u64 {
    // FNV-1a over the name, then a splitmix finalizer folding in the index
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = h ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

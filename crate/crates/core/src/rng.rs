//! Splittable seeding for reproducible parallel simulation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose key is
//! derived from a path of indices below a root seed, e.g.
//! `(root, replication r, group g)`. A draw therefore depends only on its
//! path and never on the order in which sibling streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A node in the seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream {
    key: u64,
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedStream {
    pub fn root(seed: u64) -> Self {
        SeedStream {
            key: mix64(seed.wrapping_add(GOLDEN_GAMMA)),
        }
    }

    /// Derives the `index`-th child stream.
    pub fn child(&self, index: u64) -> Self {
        let salted = mix64(index.wrapping_mul(GOLDEN_GAMMA).wrapping_add(0x632b_e59b_d9b4_e019));
        SeedStream {
            key: mix64(self.key ^ salted),
        }
    }

    /// Shorthand for a chain of [`SeedStream::child`] calls.
    pub fn path(&self, indices: &[u64]) -> Self {
        indices.iter().fold(*self, |s, &i| s.child(i))
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        let mut state = self.key;
        for chunk in seed.chunks_mut(8) {
            state = mix64(state.wrapping_add(GOLDEN_GAMMA));
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

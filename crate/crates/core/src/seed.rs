//! Labeled seed derivation.
//!
//! Every random stream in a run is seeded from the single run seed and a
//! textual label, so adding a new consumer never shifts another one. Labels in
//! use:
//!
//! - `world/prototypes`: prototype and text-embedding sampling
//! - `world/scene/{split}/{index}`: one scene
//! - `mscal/init/{class}`: initial parameters of one class module
//! - `train/task-{t}/step-{s}`: batch draw and negative sampling of one step

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derives a 64-bit seed from a root seed and a label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}

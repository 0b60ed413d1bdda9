//! Named, seeded random substreams.
//!
//! Every source of randomness in an experiment (data split, model init,
//! batch order, dropout masks, random-strategy draws) pulls from its own
//! substream derived from the master seed. Strategies run within one seed
//! therefore share identical model randomness, which isolates the effect of
//! the selection policy.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a deterministic substream from `(master, label, salt)`.
///
/// The mapping is platform-independent: the ChaCha seed is the SHA-256 of
/// the three components.
pub fn substream(master: u64, label: &str, salt: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(salt.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Derive a child seed from `(master, label, salt)`; used to hand whole
/// subsystems (training, MC scoring) their own seed namespaces.
pub fn derive(master: u64, label: &str, salt: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(salt.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

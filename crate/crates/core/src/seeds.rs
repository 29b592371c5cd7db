//! Stable per-stage seed derivation.

use sha2::{Digest, Sha256};

/// Seed for `(global, stage, index)`; independent of platform and call order.
pub fn derive_seed(global: u64, stage: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update((stage.len() as u64).to_le_bytes());
    h.update(stage.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

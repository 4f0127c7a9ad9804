//! Code-switching transcription toolkit: mixed-token error rate scoring,
//! failure-mode classification, preference-pair generation, dataset
//! assembly, a toy DPO trainer and benchmark evaluation.

pub mod datasets;
pub mod dpo_core;
pub mod error;
pub mod evalharness;
pub mod failure_modes;
pub mod jsonl;
pub mod mer;
pub mod pairgen;
pub mod text_norm;
pub mod wire;

pub use error::{Error, Result};

use sha2::{Digest, Sha256};

/// Per-item seed from a run seed and a stable item id, so results do not
/// depend on iteration order or thread count.
pub fn derive_seed(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

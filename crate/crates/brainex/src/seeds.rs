//! Seed schedule. Phantom subjects use `master + index` so manifests stay
//! readable; every other stage hashes the master seed with the stage name
//! and an index, so stages can be rerun on their own.

use sha2::{Digest, Sha256};

pub fn stage_seed(master: u64, stage: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn subject_seed(master: u64, index: usize) -> u64 {
    master.wrapping_add(index as u64)
}

//! Labelled seed derivation.
//!
//! Every random stream is `derive_seed(master, label)`, so introducing a new
//! labelled component leaves every existing stream untouched.

use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest is 32 bytes"))
}

/// `derive_seed` for an indexed family such as per-epoch shuffles.
pub fn derive_indexed(master: u64, label: &str, index: u64) -> u64 {
    derive_seed(master, &format!("{label}/{index}"))
}

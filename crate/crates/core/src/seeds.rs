//! Named sub-seeds derived from one root seed.

use sha2::{Digest, Sha256};

/// `root XOR h(name)`, where `h` is the first 8 bytes of SHA-256 read little-endian.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    let digest = Sha256::digest(name.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    root ^ u64::from_le_bytes(head)
}

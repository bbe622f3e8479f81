//! Seed splitting. Every random stream is derived from a master seed as
//! `first_8_bytes_le(SHA-256(master_le ‖ label ‖ 0x00 ‖ index_le))`.

use sha2::{Digest, Sha256};

pub fn derive(master: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

//! SHA-256 helpers shared by manifests, templates, exchanges and the ledger.

use sha2::{Digest, Sha256};

/// Name written into ledger headers so verifiers know which hash to use.
pub const HASH_ALGORITHM: &str = "sha256";

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(sha256(bytes))
}

/// Decodes a 64-character lowercase hex digest. Uppercase is rejected so
/// every digest has exactly one textual form.
pub fn decode_digest(text: &str) -> Option<[u8; 32]> {
    if text.len() != 64 || text.bytes().any(|b| b.is_ascii_uppercase()) {
        return None;
    }
    let mut out = [0u8; 32];
    hex::decode_to_slice(text, &mut out).ok()?;
    Some(out)
}

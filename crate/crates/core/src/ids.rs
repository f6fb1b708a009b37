//! Deterministic identifiers derived from content.

use sha2::{Digest, Sha256};

/// Hex digest of the given parts, joined with a unit separator so that
/// `("ab", "c")` and `("a", "bc")` never collide.
pub fn digest_hex(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            hasher.update([0x1f]);
        }
        hasher.update(part.as_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Short prefixed id: `prefix` followed by the first 16 hex digits.
pub fn short_id(prefix: &str, parts: &[&str]) -> String {
    let hex = digest_hex(parts);
    format!("{prefix}{}", &hex[..16])
}

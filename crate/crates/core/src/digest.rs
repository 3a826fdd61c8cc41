//! SHA-256 digests used to pin datasets and checkpoints to the config that
//! produced them.

use sha2::{Digest, Sha256};

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Short digest of a serializable config section. Serialization order is the
/// struct declaration order, so this is stable for a fixed build.
pub fn config_digest<T: serde::Serialize>(value: &T) -> [u8; 32] {
    let json = serde_json::to_string(value).expect("config serializes");
    sha256(json.as_bytes())
}

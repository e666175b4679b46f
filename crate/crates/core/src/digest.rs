//! Content fingerprints embedded in every artifact file.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Fingerprint of the canonical JSON encoding of `value`.
pub fn fingerprint_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config types serialize to JSON");
    fingerprint_bytes(&json)
}

/// Fingerprint of a set of named float arrays, order- and bit-sensitive.
pub fn fingerprint_params<'a>(params: impl IntoIterator<Item = (&'a str, &'a [f64])>) -> String {
    let mut hasher = Sha256::new();
    for (name, values) in params {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update((values.len() as u64).to_le_bytes());
        for v in values {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    hasher
        .finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Counter-based seed for item `index` of `domain`, independent of generation order.
pub fn item_seed(master: u64, domain: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in domain.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let a = splitmix64(master ^ h.rotate_left(23));
    splitmix64(a ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

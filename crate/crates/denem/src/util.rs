//! Deterministic seed derivation. Standard-library hashers are not stable
//! across runs or versions, so seeds are derived with FNV-1a plus a
//! SplitMix64 finalizer.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// FNV-1a over arbitrary bytes.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// SplitMix64 finalizer; decorrelates sequential seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a label + index.
pub fn derive_seed(parent: u64, label: &str, index: u64) -> u64 {
    mix(parent ^ stable_hash(label.as_bytes()) ^ mix(index))
}

//! Stable seed derivation. `std`'s hashers are not guaranteed stable across
//! releases, so streams are keyed with FNV-1a.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Derives an independent RNG seed from a base seed and a list of labels.
pub fn stream_seed(seed: u64, labels: &[&str]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &seed.to_le_bytes());
    for l in labels {
        h = fnv1a(h, l.as_bytes());
        // separator so ["ab","c"] and ["a","bc"] differ
        h = fnv1a(h, &[0xff]);
    }
    // splitmix64 finalizer
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

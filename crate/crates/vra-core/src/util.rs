//! Small deterministic helpers shared across modules.

/// SplitMix64 step; the standard finalizer makes a decent seed mixer.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a list of salts. Stable across
/// platforms and releases, unlike `std::hash`.
pub fn mix_seed(base: u64, salts: &[u64]) -> u64 {
    let mut state = base;
    let mut out = splitmix64(&mut state);
    for &s in salts {
        state ^= s;
        out ^= splitmix64(&mut state);
    }
    out
}

/// FNV-1a over bytes; used for stable string salts and config hashes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// 16-hex-digit digest of a byte string, for config provenance labels.
pub fn hex_digest(bytes: &[u8]) -> String {
    // Two passes with different suffixes to spread the 64-bit state a bit.
    let a = fnv1a64(bytes);
    let b = fnv1a64(&[bytes, &a.to_le_bytes()].concat());
    format!("{:016x}", a ^ b.rotate_left(32))
}

/// sign with sign(0) = 0; zero-gradient coordinates get no perturbation.
#[inline]
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

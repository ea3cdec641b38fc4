//! Seed derivation: every random stream is a pure function of the global seed
//! and a list of string labels.

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `seed` with each label (FNV-1a per label, then SplitMix64).
pub fn derive_seed(seed: u64, labels: &[&str]) -> u64 {
    let mut state = splitmix64(seed);
    for label in labels {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        state = splitmix64(state ^ h);
    }
    state
}

/// Convenience for numeric labels (epochs, runs).
pub fn derive_seed_n(seed: u64, label: &str, n: u64) -> u64 {
    splitmix64(derive_seed(seed, &[label]) ^ splitmix64(n))
}

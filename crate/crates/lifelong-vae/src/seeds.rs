//! Deterministic seed derivation.
//!
//! Every source of randomness in the crate is a ChaCha stream keyed by a seed
//! derived here, so identical configs replay identically on any platform.

/// SplitMix64 step; full-period permutation of u64.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a stream tag.
pub fn derive(base: u64, tag: u64) -> u64 {
    splitmix(splitmix(base) ^ splitmix(tag.wrapping_mul(0xa076_1d64_78bd_642f)))
}

/// Derive a child seed from a base seed and two stream tags.
pub fn derive2(base: u64, tag_a: u64, tag_b: u64) -> u64 {
    derive(derive(base, tag_a), tag_b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_is_deterministic_and_tag_sensitive() {
        assert_eq!(derive(7, 1), derive(7, 1));
        assert_ne!(derive(7, 1), derive(7, 2));
        assert_ne!(derive(7, 1), derive(8, 1));
        assert_ne!(derive2(7, 1, 2), derive2(7, 2, 1));
    }
}

//! Seed handling. Every random stream in the crate is derived from a
//! top-level [`RngSeed`] plus a label, so streams never depend on the order
//! in which other streams were consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RngSeed(pub u64);

/// FNV-1a over the label bytes.
pub fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in label.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngSeed {
    /// Child seed mixing in integer coordinates (image index, epoch, ...).
    pub fn derive(self, parts: &[u64]) -> RngSeed {
        RngSeed(parts.iter().fold(splitmix(self.0), |acc, &p| splitmix(acc ^ splitmix(p))))
    }

    /// Child seed keyed by a string label.
    pub fn labeled(self, label: &str) -> RngSeed {
        self.derive(&[label_hash(label)])
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    pub fn stream(self, label: &str) -> ChaCha8Rng {
        self.labeled(label).rng()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let s = RngSeed(7);
        let a: u64 = s.stream("a").random();
        let a2: u64 = s.stream("a").random();
        let b: u64 = s.stream("b").random();
        assert_eq!(a, a2);
        assert_ne!(a, b);
        assert_ne!(s.derive(&[1, 2]), s.derive(&[2, 1]));
    }
}

//! Deterministic RNG streams. Every randomized stage draws from its own
//! substream, derived by hashing the root seed together with a stage label,
//! so adding or reordering one stage never shifts the randomness of another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive a 256-bit RNG seed from a root seed and a stream label.
pub fn stream_seed(root: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

/// RNG for the substream `label` under `root`.
pub fn stream_rng(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(stream_seed(root, label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_label_same_stream() {
        let mut a = stream_rng(7, "data/shape/0");
        let mut b = stream_rng(7, "data/shape/0");
        for _ in 0..32 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn labels_are_independent() {
        let a = stream_seed(7, "data/shape/0");
        let b = stream_seed(7, "data/shape/1");
        let c = stream_seed(8, "data/shape/0");
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn label_concat_is_not_ambiguous() {
        // "ab" + "c" and "a" + "bc" would collide if the root were
        // concatenated as text; the fixed-width root prefix prevents the
        // only ambiguity we could introduce here.
        assert_ne!(stream_seed(1, "ab/c"), stream_seed(1, "a/bc"));
    }
}

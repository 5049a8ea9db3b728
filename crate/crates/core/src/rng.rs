//! Seeded random streams.
//!
//! All randomness flows through ChaCha8 (`rand_chacha::ChaCha8Rng`), whose
//! output is specified bit-for-bit and independent of platform. Independent
//! sub-streams are derived from a root seed and a stream label, so adding a
//! consumer never shifts the draws seen by another one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream for `(seed, label)`: the seed keys the generator and the label's
/// FNV-1a hash selects the ChaCha stream.
pub fn stream(seed: u64, label: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label.as_bytes()));
    rng
}

/// Child stream `index` of a labelled stream (e.g. one per learning iteration).
pub fn substream(seed: u64, label: &str, index: u64) -> Rng {
    let mut rng = stream(seed, label);
    rng.set_word_pos(u128::from(index) << 64);
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325_u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4)
            .map(|_| 0)
            .scan(stream(7, "x"), |r, _: i32| Some(r.gen()))
            .collect();
        let b: Vec<u64> = (0..4)
            .map(|_| 0)
            .scan(stream(7, "x"), |r, _: i32| Some(r.gen()))
            .collect();
        let c: Vec<u64> = (0..4)
            .map(|_| 0)
            .scan(stream(7, "y"), |r, _: i32| Some(r.gen()))
            .collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let s0: u64 = substream(7, "x", 0).gen();
        let s1: u64 = substream(7, "x", 1).gen();
        assert_ne!(s0, s1);
        assert_eq!(s0, a[0]);
    }

    #[test]
    fn chacha8_known_answer() {
        // Pins the generator algorithm: a change of backend breaks replays.
        let v: u64 = ChaCha8Rng::seed_from_u64(0).gen();
        assert_eq!(v, KNOWN);
    }

    const KNOWN: u64 = 13_080_132_717_333_068_652;
}

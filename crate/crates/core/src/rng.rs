use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a tag (epoch, sample
/// index, worker id, ...), so parallel consumers never share a generator.
pub fn derive(seed: u64, tag: u64) -> Rng {
    // splitmix64 finalizer
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

pub fn derive2(seed: u64, a: u64, b: u64) -> Rng {
    derive(seed ^ a.rotate_left(17).wrapping_mul(0xD6E8_FEB8_6659_FD93), b)
}

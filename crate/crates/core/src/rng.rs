//! Deterministic random substreams keyed by `(seed, a, b)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for the stream labelled `(a, b)` under `seed`.
pub fn substream(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(seed) ^ a) ^ b.rotate_left(17));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(a ^ b.rotate_left(32));
    rng
}

/// Stream labels used across the crate.
pub mod streams {
    pub const VIDEO_MASK: u64 = 1;
    pub const AUDIO_MASK: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const DROP_PATH: u64 = 4;
    pub const INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const SAMPLE: u64 = 7;
    pub const TEMPLATE: u64 = 8;
}

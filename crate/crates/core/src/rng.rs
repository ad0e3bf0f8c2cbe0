//! Counter-based random streams.
//!
//! A stream is addressed by `(seed, domain, client, round)`. The seed and domain
//! pick the ChaCha key, the client picks the ChaCha stream id and the round picks
//! a disjoint 2^64-word block, so draws never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Separate purposes so that, say, minibatch sampling and noise never share words.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Minibatch = 1,
    Init = 2,
    Partition = 3,
    Request = 4,
    Noise = 5,
    Synthetic = 6,
    Topology = 7,
    Attack = 8,
    Sweep = 9,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, domain: Domain, client: u64, round: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(seed) ^ domain as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(client);
    rng.set_word_pos((round as u128) << 64);
    rng
}

/// Derives a child seed, e.g. a per-client noise seed from a request seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix(splitmix(seed) ^ splitmix(tag.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

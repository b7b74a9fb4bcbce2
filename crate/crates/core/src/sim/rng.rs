//! Counter-based random streams. Every (seed, index, role, sub) tuple maps
//! to its own ChaCha stream, so results do not depend on the order or the
//! thread in which replicates are evaluated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    Outcomes,
    Covariates,
    Bootstrap,
    Resample,
    Spike,
    Pool,
}

impl StreamRole {
    fn tag(self) -> u64 {
        match self {
            StreamRole::Outcomes => 1,
            StreamRole::Covariates => 2,
            StreamRole::Bootstrap => 3,
            StreamRole::Resample => 4,
            StreamRole::Spike => 5,
            StreamRole::Pool => 6,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit key from the stream coordinates.
pub fn stream_key(seed: u64, index: u64, role: StreamRole, sub: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ index);
    h = splitmix64(h ^ role.tag());
    splitmix64(h ^ sub)
}

pub fn substream(seed: u64, index: u64, role: StreamRole, sub: u64) -> ChaCha8Rng {
    let key = stream_key(seed, index, role, sub);
    let mut bytes = [0u8; 32];
    let mut h = key;
    for chunk in bytes.chunks_mut(8) {
        h = splitmix64(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

//! All randomness derives from one user seed through named sub-streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Shuffle,
    Synth,
    Test,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Shuffle => 2,
            Stream::Synth => 3,
            Stream::Test => 4,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Sub-stream further keyed by an index (e.g. one per synthetic sample).
pub fn indexed_stream(seed: u64, which: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = stream(seed, which);
    rng.set_word_pos(0);
    rng.set_stream(which.id() | (index.wrapping_add(1) << 8));
    rng
}

//! Seeded random streams.
//!
//! Every stochastic component draws from a `ChaCha8Rng`. Independent streams
//! are derived from a master seed with [`stream`], which selects the ChaCha
//! stream id, so per-video and per-cell generators never overlap and do not
//! depend on the order in which they are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeedRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream `id` of the generator seeded with `seed`.
pub fn stream(seed: u64, id: u64) -> SeedRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Packs two small counters into one stream id.
pub fn stream_id(major: u64, minor: u64) -> u64 {
    (major << 32) | (minor & 0xffff_ffff)
}

/// Whether a forward pass is training (dropout active) or evaluating.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut SeedRng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

//! Seed derivation. Every random decision draws from a ChaCha stream keyed by
//! `(seed, domain, index)`, so each consumer's draws are independent of the
//! order in which other consumers run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub(crate) enum Domain {
    Subject = 1,
    Ensemble = 2,
    TaskOrder = 3,
    Split = 4,
    MetaDropout = 5,
    PretrainInit = 6,
    PretrainShuffle = 7,
    PretrainDropout = 8,
    HeadInit = 9,
    AdaptSample = 10,
    AdaptShuffle = 11,
    AdaptDropout = 12,
    ScratchInit = 13,
}

pub(crate) fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 48) ^ index);
    rng
}

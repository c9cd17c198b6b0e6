//! Independent, reproducible random streams.
//!
//! Every consumer of randomness in a run draws from its own ChaCha stream,
//! keyed by `(seed, Stream)`. Enabling NAS therefore never shifts the key
//! sequence or the value noise seen by the paired vanilla run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    WeightInit,
    Keys,
    ValueNoise,
    Paraphrase,
    Pilot,
    PilotValueNoise,
    ProbeKeys,
    ProbeValueNoise,
    Neighborhood,
    Holdout,
    KeyModel,
    KeyPool,
    Readout,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::WeightInit => 1,
            Stream::Keys => 2,
            Stream::ValueNoise => 3,
            Stream::Paraphrase => 4,
            Stream::Pilot => 5,
            Stream::PilotValueNoise => 6,
            Stream::ProbeKeys => 7,
            Stream::ProbeValueNoise => 8,
            Stream::Neighborhood => 9,
            Stream::Holdout => 10,
            Stream::KeyModel => 11,
            Stream::KeyPool => 12,
            Stream::Readout => 13,
        }
    }
}

/// The generator for `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: Stream) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

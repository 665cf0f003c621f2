//! Seed derivation. Every random draw in an experiment comes from a ChaCha
//! stream keyed by the experiment seed and a fixed stream id, so components
//! never share generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Partition,
    Holdout,
    Init,
    Server,
    /// One per distillation role.
    Distill(usize),
    Client(usize),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Partition => 0,
            Stream::Holdout => 1,
            Stream::Init => 2,
            Stream::Server => 3,
            Stream::Distill(i) => 512 + i as u64,
            Stream::Client(i) => 1024 + i as u64,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

pub fn client_rng(seed: u64, index: usize) -> Rng {
    stream(seed, Stream::Client(index))
}

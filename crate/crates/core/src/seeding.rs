//! Every random draw in a run derives from the single run seed through a
//! dedicated ChaCha stream, so components never perturb each other's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub(crate) enum Stream {
    Synthetic,
    Init,
    KMeans,
    Batches { epoch: u64 },
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Synthetic => 1,
            Stream::Init => 2,
            Stream::KMeans => 3,
            Stream::Batches { epoch } => 1_000 + epoch,
        }
    }
}

pub(crate) fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

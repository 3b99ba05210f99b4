//! Seeded random streams.
//!
//! Every run derives its generators from a single 64-bit seed. The generator
//! is ChaCha8 (`rand_chacha::ChaCha8Rng`), whose output is fixed by its
//! algorithm and therefore identical across platforms. Independent purposes
//! (dataset noise, weight init, Langevin noise, minibatch order) use distinct ChaCha stream
//! ids so that, for example, changing the number of SGLD steps never shifts
//! the weight initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as StreamRng;

/// What a random stream is used for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Source-domain sample generation.
    SourceData,
    /// Target-domain sample generation.
    TargetData,
    /// Network weight initialization.
    Init,
    /// Langevin chain noise.
    Sgld,
    /// Minibatch order.
    Shuffle,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::SourceData => 1,
            Stream::TargetData => 2,
            Stream::Init => 3,
            Stream::Sgld => 4,
            Stream::Shuffle => 5,
        }
    }
}

/// Generator for `purpose` derived from `seed`.
pub fn stream(seed: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose.id());
    rng
}

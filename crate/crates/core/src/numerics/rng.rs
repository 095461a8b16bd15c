use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent random streams derived from one run seed.
///
/// Each consumer draws from its own ChaCha stream, so enabling dropout or
/// changing the shuffle never shifts the initialization draws.
#[derive(Debug, Clone)]
pub struct RunRngs {
    pub init: Rng,
    pub dropout: Rng,
    pub shuffle: Rng,
}

impl RunRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            init: stream(seed, 0),
            dropout: stream(seed, 1),
            shuffle: stream(seed, 2),
        }
    }
}

pub fn stream(seed: u64, id: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

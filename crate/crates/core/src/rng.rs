use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seed for every randomized operation. Same seed, same bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngSpec {
    pub seed: u64,
}

impl RngSpec {
    pub const ALGORITHM: &'static str = "ChaCha8Rng";

    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Stream for one independent unit of work (a trial, a worker).
    pub fn derive(&self, index: u64) -> RngSpec {
        RngSpec {
            seed: self.seed ^ index,
        }
    }
}

impl Default for RngSpec {
    fn default() -> Self {
        Self { seed: 0 }
    }
}

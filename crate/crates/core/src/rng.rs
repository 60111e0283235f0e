//! Seeded PRNG streams.
//!
//! Every consumer of randomness draws from its own ChaCha8 stream derived
//! from the run seed, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    DeviceInit(usize),
    ServerInit(usize),
    /// Reparameterization noise drawn by the server of a pair.
    Noise(usize),
    /// Per-epoch reshuffle of one pair's training shard.
    Shuffle(usize),
    /// Noise for the per-epoch testing pass of one pair.
    TestNoise(usize),
    Sharding,
    Election,
    Attack,
    SyntheticCenters,
    SyntheticSamples,
    SyntheticTestSamples,
}

impl Stream {
    fn id(self) -> u64 {
        const STRIDE: u64 = 1 << 32;
        match self {
            Stream::Sharding => 1,
            Stream::Election => 2,
            Stream::Attack => 3,
            Stream::SyntheticCenters => 4,
            Stream::SyntheticSamples => 5,
            Stream::SyntheticTestSamples => 6,
            Stream::DeviceInit(i) => STRIDE + i as u64,
            Stream::ServerInit(i) => 2 * STRIDE + i as u64,
            Stream::Noise(i) => 3 * STRIDE + i as u64,
            Stream::Shuffle(i) => 4 * STRIDE + i as u64,
            Stream::TestNoise(i) => 5 * STRIDE + i as u64,
        }
    }
}

pub fn stream_rng(seed: u64, stream: Stream) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

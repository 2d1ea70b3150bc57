//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! the run seed, so topology, parameter draws, per-user arrivals and policy
//! coin flips never share state. Arrival streams do not depend on the policy,
//! which gives common random numbers across policy comparisons.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Topology,
    ArrivalMeans,
    TxCaps,
    Policy,
    Arrivals(usize),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Topology => 0,
            Stream::ArrivalMeans => 1,
            Stream::TxCaps => 2,
            Stream::Policy => 3,
            Stream::Arrivals(user) => 1024 + user as u64,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

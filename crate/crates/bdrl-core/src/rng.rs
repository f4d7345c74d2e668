//! Deterministic stream derivation: every random consumer owns a ChaCha
//! stream keyed by (seed, domain, index), so results never depend on
//! scheduling or iteration order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub enum StreamDomain {
    Cohort = 1,
    Trajectory = 2,
    GroupTraining = 3,
    AgentTraining = 4,
    ClusterRestart = 5,
    Evaluation = 6,
    QLearning = 7,
}

pub fn stream_rng(seed: u64, domain: StreamDomain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((domain as u64) << 56) ^ index);
    rng
}

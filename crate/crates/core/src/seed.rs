//! Seed derivation for independent, reproducible random streams.
//!
//! Every stream in the system is a `ChaCha8Rng` seeded from a 64-bit value
//! derived from the master seed with the SplitMix64 finalizer:
//!
//! ```text
//! z += 0x9E37_79B9_7F4A_7C15
//! z  = (z ^ (z >> 30)) * 0xBF58_476D_1CE4_E5B9
//! z  = (z ^ (z >> 27)) * 0x94D0_49BB_1331_11EB
//! z  =  z ^ (z >> 31)
//! ```
//!
//! A replication `r` at sweep point `p` runs with
//! `splitmix64(splitmix64(splitmix64(master) ^ p) ^ r)`, and agent `i` of that
//! run draws from `derive_seed(run_seed, AGENT_STREAM, i)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Domain tag separating per-agent streams from sweep-point indices.
pub const AGENT_STREAM: u64 = 0xA6E7_0000_0000_0001;

pub fn splitmix64(z: u64) -> u64 {
    let mut z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for replication `replication` at sweep point `point`.
pub fn derive_seed(master: u64, point: u64, replication: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ point) ^ replication)
}

pub fn agent_seed(run_seed: u64, agent_id: usize) -> u64 {
    derive_seed(run_seed, AGENT_STREAM, agent_id as u64)
}

pub fn agent_rng(run_seed: u64, agent_id: usize) -> StreamRng {
    StreamRng::seed_from_u64(agent_seed(run_seed, agent_id))
}

pub fn stream_rng(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

//! Seeded random streams.
//!
//! Every stochastic choice in a run draws from a stream keyed by
//! `(master_seed, purpose, client, round)`, so changing which clients take
//! part in a round never shifts another client's randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type SimRng = ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    ProblemData = 1,
    ModelInit = 2,
    LocalTraining = 3,
    Upload = 4,
    Participation = 5,
    Download = 6,
    Diagnostics = 7,
}

/// Independent stream for one `(purpose, client, round)` slot.
pub fn stream(master_seed: u64, purpose: Purpose, client: u64, round: u64) -> SimRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&client.to_le_bytes());
    key[24..].copy_from_slice(&round.to_le_bytes());
    SimRng::from_seed(key)
}

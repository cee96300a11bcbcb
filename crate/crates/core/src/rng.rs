//! Deterministic random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by
//! `(master_seed, purpose, round, client)`. The 256-bit ChaCha key is the
//! concatenation of the four words, so distinct tuples never share a stream
//! and results do not depend on the order in which streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Data = 1,
    Partition = 2,
    Init = 3,
    Select = 4,
    ClientUpdate = 5,
    Finetune = 6,
}

pub fn stream(master_seed: u64, purpose: Purpose, round: u64, client: u64) -> Stream {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&round.to_le_bytes());
    key[24..32].copy_from_slice(&client.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

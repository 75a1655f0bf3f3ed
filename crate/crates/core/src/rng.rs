//! Seed splitting. Every random draw in the crate comes from a ChaCha stream
//! keyed by (run seed, component name, counters), so runs replay exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn component_rng(seed: u64, component: &str) -> Rng {
    stream_rng(seed, component, &[])
}

pub fn stream_rng(seed: u64, component: &str, counters: &[u64]) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(component.as_bytes());
    for c in counters {
        h.update(c.to_le_bytes());
    }
    let key: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(key)
}

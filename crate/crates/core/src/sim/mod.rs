//! Deterministic discrete-event engine, network model and simulated authentication.

mod auth;
mod dist;
mod network;
mod queue;
mod time;

pub use auth::{KeyRegistry, Signer, Tag};
pub use dist::{Moments, TruncatedNormal};
pub use network::{NetworkConfig, PreGstPolicy};
pub use queue::EventQueue;
pub use time::SimTime;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Independent random stream `stream` derived from a scenario seed.
pub fn rng_stream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

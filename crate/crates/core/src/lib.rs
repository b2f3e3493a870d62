//! Multi-scale coordinated self-supervised learning for paired volumetric
//! modalities.
//!
//! The crate is `no_std` with `alloc`: every routine here is a pure function
//! of its inputs and an explicit RNG. File formats, experiment directories and
//! the command-line driver live in the `msc` companion crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod saliency;
pub mod stats;
pub mod synth;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use volume::Volume;

/// Seeded generator used everywhere an RNG is taken as a parameter.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Creates the crate's RNG from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

//! Dense tensors, layer kernels, reverse-mode gradients and the optimizer.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod tape;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{directional_grad_check, finite_diff_grad_check};
pub use tape::{Component, FlopCounter, Gradients, ParamId, ParamStore, Parameter, Tape, Var};
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The crate's seeded generator. Streams derived from the same
/// `(seed, stream)` pair are identical on every platform.
pub fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

//! Dense tensors, the differentiation tape, and the seeded sampler.

mod dense;
mod rng;
mod tape;

pub use dense::{parallel_enabled, set_parallel, Tensor, NORM_FLOOR};
pub use rng::{sample_standard_normal, RngState, RNG_ALGORITHM};
pub use tape::{sigmoid, Gradients, Tape, Var};

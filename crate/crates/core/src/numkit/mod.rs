//! Dense linear algebra, deterministic random streams, sphere sampling and a
//! matrix-level reverse-mode gradient tape.
//!
//! Everything here is `f64`. The Monte Carlo checks in [`crate::theory`]
//! resolve residuals of order 1e-7, which single precision cannot represent.

mod gradcheck;
mod mat;
mod rng;
mod tape;

pub use gradcheck::{finite_diff_check, FiniteDiffReport};
pub use mat::{pairwise_sum, Mat, Vector};
pub use rng::{sphere_uniform, Rng};
pub use tape::{Gradients, Tape, Var};
pub(crate) use mat::dot as dot_slices;
pub(crate) use tape::{entropy, softmax_in_place};

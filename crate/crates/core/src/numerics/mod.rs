//! Dense matrices, singular values, seeded randomness and the Adam/StepLR
//! optimizer everything else is built on.

mod matrix;
mod optim;
mod rng;
mod softmax;
mod svd;

pub use matrix::{dot, frobenius_norm, matmul, Matrix};
pub use optim::{adam_step, OptimizerState, StepLr};
pub use rng::{derive_seed, seeded, SeededRng};
pub use softmax::{argmax, softmax, softmax_in_place, softmax_rows};
pub use svd::{all_singular_values, svd_values, DEFAULT_SVD_TOL};

//! Dense vector helpers, seeded randomness, probability utilities and a
//! finite-difference gradient checker.

mod linalg;
mod prob;
mod rng;

pub use linalg::{axpy, cosine, dot, kahan_sum, l2_dist, norm, sq_dist, KahanSum, Mat64};
pub use prob::{finite_diff_grad, finite_diff_grad_5pt, sample_without_replacement, softmax, SelectionOutcome};
pub use rng::{derive_seed, splitmix64, SeededRng};

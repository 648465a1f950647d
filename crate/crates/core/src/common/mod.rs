//! Seedable numeric kernel: vectors, matrices, permutations and the binary codec.

pub mod codec;
mod matrix;
mod perm;
mod rng;
mod vector;

pub use matrix::{
    gen_conditioned_matrix, gen_invertible_matrix, solve, InvertibleMatrix, Mat64, CONDITIONED_SPREAD, MAX_CONDITION,
    MAX_RECONSTRUCTION_ERROR,
};
pub use perm::{gen_permutation, Perm};
pub use rng::{derive_seed, SeededRng};
pub use vector::{dot, elementwise, sq_dist, sq_dist_slice, ElementwiseOp, Vec64, DIV_FLOOR};

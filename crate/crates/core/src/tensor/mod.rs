//! Dense numeric kernel: matrices, rank-3 arrays, SVD/PCA, reverse-mode
//! differentiation and the `HVPL-MAT v1` container.

pub mod io;
mod matrix;
pub mod svd;
pub mod tape;
mod tensor3;

pub use matrix::Matrix;
pub use svd::{pca_reduce, svd, Pca, Svd};
pub use tape::{CustomBackward, GradTape, Gradients, Var};
pub use tensor3::Tensor3;

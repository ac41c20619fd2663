//! Dense linear algebra and reverse-mode autodiff.

pub mod eigen;
mod matrix;
pub mod tape;

pub use eigen::{inv_sqrt_psd, sqrt_psd, sym_eig, sym_eig_from, SymEig};
pub use matrix::{dot, norm, Matrix};
pub use tape::{Gradients, Mask, Tape, Var};

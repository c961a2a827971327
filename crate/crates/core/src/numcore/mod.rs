//! Numerical substrate: dense matrices, symmetric eigendecomposition, exact
//! DFTs and a reverse-mode tape.

pub mod dft;
pub mod eigen;
pub mod fdcheck;
mod matrix;
pub mod tape;

pub use dft::{dft, dft_real, ComplexSpectrum, Direction};
pub use eigen::{sym_eigendecompose, SymEigen};
pub use fdcheck::{finite_difference_check, FdReport};
pub use matrix::{dot, DenseMatrix};
pub use tape::{Gradients, Tape, Var};

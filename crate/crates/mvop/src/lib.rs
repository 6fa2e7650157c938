//! Multivariate orthogonal polynomials built from block factorizations of
//! moment matrices, with numerical checks of their structural identities.

pub mod blockmat;
pub mod darboux;
pub mod error;
pub mod measure;
pub mod mindex;
pub mod moments;
pub mod mvopr;
pub mod shift;
pub mod suites;
pub mod symmetry;
pub mod toda;

pub use error::{MvopError, Result};

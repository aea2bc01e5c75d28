//! Lattice topology optimization with orthotropic hollow cells and
//! field-aligned lattice compilation.

pub mod compiler;
pub mod error;
pub mod fea;
pub mod fields;
pub mod homogenization;
pub mod linsolve;
pub mod optimizer;
pub mod pipeline;
pub mod voigt;

pub use error::{Error, Result};

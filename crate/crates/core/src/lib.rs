//! Majorana-fermion solution of the triangle-decorated honeycomb model and
//! edge-mediated quantum state transfer between spin registers.

pub mod error;
pub mod fermion;
pub mod gauge;
pub mod lattice;
pub mod linalg;
pub mod noise;
pub mod numfmt;
pub mod oracle;
pub mod transfer;

pub use error::{Error, Result};

//! Solvers, oracles and verification tools for mean-field-type control
//! through the HJB equation satisfied by the linear functional derivative
//! of the value function.
//!
//! Reference numerics are one-dimensional: states live on a truncated grid
//! [`Grid1D`], time on a uniform [`TimeMesh`].

// `!(x > 0.0)` rejects NaN as well; stencil loops read better indexed.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod field;
pub mod fixedpoint;
pub mod flow;
pub mod grid;
pub mod hjb;
pub mod majorant;
pub mod measure;
pub mod model;
pub mod oracle;
pub mod pde;
pub mod quad;
pub mod rng;
pub mod tridiag;
pub mod valuefn;

pub use error::{Error, Result};
pub use field::{ScalarField, VectorField};
pub use grid::{Grid1D, TimeMesh};

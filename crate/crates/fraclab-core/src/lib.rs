//! Numerical laboratory for anisotropic fractional p-biharmonic operators
//! on periodic grids.
//!
//! The crate discretizes the operator
//!
//! ```text
//! L u = (-Delta)^(s/2) ( |A^(1/2) (-Delta)^(s/2) u|^(p-2) A (-Delta)^(s/2) u )
//! ```
//!
//! on a uniform periodic grid, solves the interior-source and exterior-value
//! problems by convex energy minimization, computes optimal fractional
//! Poincare constants and discrete Dirichlet-to-Neumann (DN) maps, evaluates
//! the harmonic extension to the upper half space through the generalized
//! Poisson kernel, and runs monotonicity-based reconstructions of a conformal
//! coefficient from DN data.

pub mod acceptance;
pub mod dnmap;
pub mod energy;
pub mod error;
pub mod extension;
pub mod grid;
pub mod inverse;
pub mod io;
pub mod oracle;
pub mod poincare;
pub mod solver;

pub use error::{CoreError, Result};
pub use grid::{Field, GridSpec, LaplacianOrder};

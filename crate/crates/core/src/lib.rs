//! Numerical toolkit for 2D isentropic compressible Navier-Stokes flows whose
//! initial data vary slowly in one direction.
//!
//! The crate solves three coupled problems on periodic domains:
//!
//! * the parameterized 1D limit system for `(eta, w)` plus a passive vertical
//!   velocity, one copy per node of a slow-coordinate grid (a "slab"),
//! * the full 2D system for `(rho, u)` on a periodic box,
//! * the asymptotic bookkeeping that connects them: the embedded approximate
//!   solution, the residual forcing it leaves in the 2D equations, the
//!   remainder fields, and the energy/entropy diagnostics built from them.
//!
//! A separate analysis module verifies the functional inequalities the
//! diagnostics rely on (weighted Poincare, a refined Gagliardo-Nirenberg
//! interpolation bound, cumulative-integral operator identities) and fits
//! exponential decay rates to recorded norm histories.
//!
//! All spatial derivatives are spectral (FFT) on uniform periodic grids;
//! time stepping is IMEX-BDF2 with implicit constant-coefficient diffusion.

pub mod analysis;
pub mod asymptotics;
pub mod error;
pub mod field;
pub mod grid;
pub mod model;
pub mod series;
pub mod solver1d;
pub mod solver2d;
pub mod spectral;

pub use error::{Error, Result};
pub use field::{Field1D, Field2D, FieldRole};
pub use grid::{Grid2D, GridX, GridY};
pub use model::{DataFamily, FluidParams, InitialDataSpec};
pub use series::DiagnosticSeries;

//! Uniform periodic grids.
//!
//! The fast direction is the unit torus `x in [0,1)`. The slow direction is
//! a large periodic box `y in [-L, L)`; the continuous problem poses y on the
//! whole line, and the box stands in for it as long as the data decay below a
//! configured floor before the boundary wraps around.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Torus grid in x: `n` uniform nodes `x_j = j/n` on a domain of length 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridX {
    n: usize,
}

impl GridX {
    pub const MIN_NODES: usize = 16;

    pub fn new(n: usize) -> Result<Self> {
        if n < Self::MIN_NODES || n % 2 != 0 {
            return Err(Error::config(format!(
                "n_x must be even and >= {}, got {n}",
                Self::MIN_NODES
            )));
        }
        Ok(GridX { n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        j as f64 / self.n as f64
    }

    /// Domain length (always 1: the unit torus).
    pub fn length(&self) -> f64 {
        1.0
    }

    /// Angular wavenumber of integer mode `m`: `k = 2 pi m`.
    pub fn wavenumber(&self, m: i64) -> f64 {
        2.0 * std::f64::consts::PI * m as f64
    }
}

/// Periodic grid in y: `n` uniform nodes on `[-L, L)`.
///
/// Odd node counts are accepted (they avoid the unpaired Nyquist mode and the
/// default slab uses 33 slices); the only hard requirements are enough nodes
/// for the spectral transforms to mean anything.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridY {
    n: usize,
    half_length: f64,
}

impl GridY {
    pub const MIN_NODES: usize = 16;

    pub fn new(n: usize, half_length: f64) -> Result<Self> {
        if n < Self::MIN_NODES {
            return Err(Error::config(format!(
                "n_y must be >= {}, got {n}",
                Self::MIN_NODES
            )));
        }
        if !(half_length > 0.0) || !half_length.is_finite() {
            return Err(Error::config(format!(
                "y half-length must be positive and finite, got {half_length}"
            )));
        }
        Ok(GridY { n, half_length })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn half_length(&self) -> f64 {
        self.half_length
    }

    /// Domain length `2L`.
    pub fn length(&self) -> f64 {
        2.0 * self.half_length
    }

    pub fn dy(&self) -> f64 {
        self.length() / self.n as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        -self.half_length + j as f64 * self.dy()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.node(j)).collect()
    }

    /// Angular wavenumber of integer mode `m`: `k = 2 pi m / (2L) = pi m / L`.
    pub fn wavenumber(&self, m: i64) -> f64 {
        std::f64::consts::PI * m as f64 / self.half_length
    }

    /// Check that a sampled envelope has decayed below `floor * peak` at the
    /// box edge, i.e. the periodic truncation of the line is admissible.
    pub fn check_envelope_decay(&self, edge_value: f64, peak: f64, floor: f64) -> Result<()> {
        if peak > 0.0 && edge_value.abs() > floor * peak {
            return Err(Error::config(format!(
                "y box too small: envelope at |y| = L is {:.3e} of peak (floor {:.1e})",
                edge_value.abs() / peak,
                floor
            )));
        }
        Ok(())
    }
}

/// Tensor grid for 2D fields: unit torus in x times periodic box in y.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub x: GridX,
    pub y: GridY,
}

impl Grid2D {
    pub fn new(x: GridX, y: GridY) -> Self {
        Grid2D { x, y }
    }

    pub fn node_count(&self) -> usize {
        self.x.len() * self.y.len()
    }

    /// Cell area `dx * dy`.
    pub fn cell(&self) -> f64 {
        self.x.dx() * self.y.dy()
    }
}

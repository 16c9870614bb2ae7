//! Sampled scalar fields on the periodic grids, plus the flat binary
//! checkpoint layout.
//!
//! Checkpoint record layout (little-endian):
//!
//! ```text
//! offset size  content
//! 0      8     magic b"SLOWNSFD"
//! 8      4     format version (u32, currently 1)
//! 12     4     n_x (u32)
//! 16     4     n_y (u32; 1 for 1D fields)
//! 20     4     role tag (u32)
//! 24     8     y half-length (f64; 0 for 1D fields)
//! 32     8*n   samples, row-major (y outer, x inner), f64
//! ```

use crate::error::{Error, Result};
use crate::grid::{Grid2D, GridX, GridY};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SLOWNSFD";
pub const CHECKPOINT_VERSION: u32 = 1;

/// What a field stores; density-tagged fields must stay strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldRole {
    Density,
    Velocity,
    Derived,
}

impl FieldRole {
    pub fn tag(self) -> u32 {
        match self {
            FieldRole::Density => 1,
            FieldRole::Velocity => 2,
            FieldRole::Derived => 3,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            1 => Ok(FieldRole::Density),
            2 => Ok(FieldRole::Velocity),
            3 => Ok(FieldRole::Derived),
            other => Err(Error::BadCheckpoint(format!("unknown role tag {other}"))),
        }
    }
}

/// Scalar field sampled on a [`GridX`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field1D {
    grid: GridX,
    role: FieldRole,
    data: Vec<f64>,
}

impl Field1D {
    pub fn new(grid: GridX, role: FieldRole, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::mismatch(format!(
                "field length {} != grid size {}",
                data.len(),
                grid.len()
            )));
        }
        let f = Field1D { grid, role, data };
        f.validate()?;
        Ok(f)
    }

    pub fn zeros(grid: GridX) -> Self {
        Field1D {
            grid,
            role: FieldRole::Derived,
            data: vec![0.0; grid.len()],
        }
    }

    /// Derived-role field from raw samples; callers guarantee finiteness.
    pub fn derived(grid: GridX, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), grid.len());
        Field1D {
            grid,
            role: FieldRole::Derived,
            data,
        }
    }

    pub fn constant(grid: GridX, value: f64) -> Self {
        Field1D {
            grid,
            role: FieldRole::Derived,
            data: vec![value; grid.len()],
        }
    }

    /// Sample a closure at the grid nodes.
    pub fn from_fn(grid: GridX, role: FieldRole, f: impl Fn(f64) -> f64) -> Self {
        let data = (0..grid.len()).map(|j| f(grid.node(j))).collect();
        Field1D { grid, role, data }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("field contains non-finite samples"));
        }
        if self.role == FieldRole::Density && !self.data.iter().all(|&v| v > 0.0) {
            return Err(Error::domain("density field must be strictly positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridX {
        self.grid
    }

    pub fn role(&self) -> FieldRole {
        self.role
    }

    pub fn with_role(mut self, role: FieldRole) -> Self {
        self.role = role;
        self
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Pointwise binary combination; grids must match.
    pub fn zip_with(&self, other: &Field1D, f: impl Fn(f64, f64) -> f64) -> Field1D {
        debug_assert_eq!(self.grid, other.grid);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Field1D {
            grid: self.grid,
            role: FieldRole::Derived,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field1D {
        Field1D {
            grid: self.grid,
            role: FieldRole::Derived,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Scalar field sampled on a [`Grid2D`], row-major with y as the outer index:
/// sample `(ix, iy)` lives at `data[iy * n_x + ix]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field2D {
    grid: Grid2D,
    role: FieldRole,
    data: Vec<f64>,
}

impl Field2D {
    pub fn new(grid: Grid2D, role: FieldRole, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.node_count() {
            return Err(Error::mismatch(format!(
                "field length {} != grid size {}",
                data.len(),
                grid.node_count()
            )));
        }
        let f = Field2D { grid, role, data };
        f.validate()?;
        Ok(f)
    }

    pub fn zeros(grid: Grid2D) -> Self {
        Field2D {
            grid,
            role: FieldRole::Derived,
            data: vec![0.0; grid.node_count()],
        }
    }

    /// Derived-role field from raw samples; callers guarantee finiteness.
    pub fn derived(grid: Grid2D, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), grid.node_count());
        Field2D {
            grid,
            role: FieldRole::Derived,
            data,
        }
    }

    pub fn constant(grid: Grid2D, value: f64) -> Self {
        Field2D {
            grid,
            role: FieldRole::Derived,
            data: vec![value; grid.node_count()],
        }
    }

    pub fn from_fn(grid: Grid2D, role: FieldRole, f: impl Fn(f64, f64) -> f64) -> Self {
        let nx = grid.x.len();
        let ny = grid.y.len();
        let mut data = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            let y = grid.y.node(iy);
            for ix in 0..nx {
                data.push(f(grid.x.node(ix), y));
            }
        }
        Field2D { grid, role, data }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("field contains non-finite samples"));
        }
        if self.role == FieldRole::Density && !self.data.iter().all(|&v| v > 0.0) {
            return Err(Error::domain("density field must be strictly positive"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Grid2D {
        self.grid
    }

    pub fn role(&self) -> FieldRole {
        self.role
    }

    pub fn with_role(mut self, role: FieldRole) -> Self {
        self.role = role;
        self
    }

    pub fn nx(&self) -> usize {
        self.grid.x.len()
    }

    pub fn ny(&self) -> usize {
        self.grid.y.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, iy: usize) -> &[f64] {
        let nx = self.nx();
        &self.data[iy * nx..(iy + 1) * nx]
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.data[iy * self.nx() + ix]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn zip_with(&self, other: &Field2D, f: impl Fn(f64, f64) -> f64) -> Field2D {
        debug_assert_eq!(self.grid, other.grid);
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Field2D {
            grid: self.grid,
            role: FieldRole::Derived,
            data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field2D {
        Field2D {
            grid: self.grid,
            role: FieldRole::Derived,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn write_header<W: Write>(
    w: &mut W,
    nx: u32,
    ny: u32,
    role: FieldRole,
    half_length: f64,
) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&nx.to_le_bytes())?;
    w.write_all(&ny.to_le_bytes())?;
    w.write_all(&role.tag().to_le_bytes())?;
    w.write_all(&half_length.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_header<R: Read>(r: &mut R) -> Result<(u32, u32, FieldRole, f64)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::BadCheckpoint("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::BadCheckpoint(format!("unknown version {version}")));
    }
    let nx = read_u32(r)?;
    let ny = read_u32(r)?;
    let role = FieldRole::from_tag(read_u32(r)?)?;
    let half_length = read_f64(r)?;
    Ok((nx, ny, role, half_length))
}

fn read_samples<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

impl Field1D {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_header(w, self.grid.len() as u32, 1, self.role, 0.0)?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (nx, ny, role, _) = read_header(r)?;
        if ny != 1 {
            return Err(Error::BadCheckpoint(format!(
                "expected 1D record, found n_y = {ny}"
            )));
        }
        let grid = GridX::new(nx as usize)?;
        let data = read_samples(r, nx as usize)?;
        Field1D::new(grid, role, data)
    }
}

impl Field2D {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        write_header(
            w,
            self.nx() as u32,
            self.ny() as u32,
            self.role,
            self.grid.y.half_length(),
        )?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (nx, ny, role, half_length) = read_header(r)?;
        if ny < 2 {
            return Err(Error::BadCheckpoint("expected 2D record".into()));
        }
        let grid = Grid2D::new(GridX::new(nx as usize)?, GridY::new(ny as usize, half_length)?);
        let data = read_samples(r, nx as usize * ny as usize)?;
        Field2D::new(grid, role, data)
    }
}

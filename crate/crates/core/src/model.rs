//! Physical parameters, the power-law pressure and its potential, and the
//! admissible initial-data families.
//!
//! The pressure is `p(rho) = a rho^gamma`. Its potential `P` is the convex
//! function with `rho P'(rho) - P(rho) = p(rho)`:
//!
//! * `gamma > 1`: `P(rho) = a rho^gamma / (gamma - 1)`,
//! * `gamma = 1`: `P(rho) = a (rho log rho + 1)`, for which
//!   `rho P' - P = a (rho - 1)` (shifted by a constant; only differences of
//!   `P` enter the energy and entropy functionals, so the shift is harmless).

use crate::error::{Error, Result};
use crate::field::{Field2D, FieldRole};
use crate::grid::{Grid2D, GridX, GridY};
use crate::spectral;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Constant physical parameters of the barotropic flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluidParams {
    /// Pressure coefficient `a > 0`.
    pub pressure_coeff: f64,
    /// Adiabatic exponent `gamma` in `[1, 2]`.
    pub adiabatic_index: f64,
    /// Shear viscosity `mu > 0`.
    pub shear_viscosity: f64,
    /// Bulk viscosity `mu'` with `mu + mu' > 0`.
    pub bulk_viscosity: f64,
}

impl FluidParams {
    pub fn new(a: f64, gamma: f64, mu: f64, mu_prime: f64) -> Result<Self> {
        if !(a > 0.0) {
            return Err(Error::config(format!("pressure coefficient a = {a} must be > 0")));
        }
        if !(1.0..=2.0).contains(&gamma) {
            return Err(Error::config(format!("adiabatic index gamma = {gamma} must lie in [1, 2]")));
        }
        if !(mu > 0.0) {
            return Err(Error::config(format!("shear viscosity mu = {mu} must be > 0")));
        }
        if !(mu + mu_prime > 0.0) {
            return Err(Error::config(format!(
                "mu + mu' = {} must be > 0",
                mu + mu_prime
            )));
        }
        Ok(FluidParams {
            pressure_coeff: a,
            adiabatic_index: gamma,
            shear_viscosity: mu,
            bulk_viscosity: mu_prime,
        })
    }

    /// Combined 1D viscosity `nu = mu + mu'`.
    pub fn nu(&self) -> f64 {
        self.shear_viscosity + self.bulk_viscosity
    }

    /// Does the optional normalization `p'(1) = a gamma = 1` hold?
    pub fn is_pressure_normalized(&self) -> bool {
        (self.pressure_coeff * self.adiabatic_index - 1.0).abs() < 1e-12
    }

    /// `p(rho) = a rho^gamma`.
    pub fn pressure(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        Ok(self.pressure_raw(rho))
    }

    /// `p'(rho) = a gamma rho^(gamma-1)`.
    pub fn pressure_derivative(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        Ok(self.pressure_coeff * self.adiabatic_index * rho.powf(self.adiabatic_index - 1.0))
    }

    /// Isentropic sound speed `sqrt(p'(rho))`.
    pub fn sound_speed(&self, rho: f64) -> Result<f64> {
        Ok(self.pressure_derivative(rho)?.sqrt())
    }

    /// Pressure potential `P(rho)` (see module docs).
    pub fn pressure_potential(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        Ok(self.potential_raw(rho))
    }

    /// `P'(rho)`: `a gamma rho^(gamma-1) / (gamma-1)` for `gamma > 1`,
    /// `a (log rho + 1)` for `gamma = 1`.
    pub fn potential_derivative(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        Ok(self.potential_derivative_raw(rho))
    }

    /// Convexity gap `P(rho) - P(ref) - P'(ref)(rho - ref) >= 0`.
    pub fn relative_potential(&self, rho: f64, rho_ref: f64) -> Result<f64> {
        self.check_density(rho)?;
        self.check_density(rho_ref)?;
        Ok(self.relative_potential_raw(rho, rho_ref))
    }

    fn check_density(&self, rho: f64) -> Result<()> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::domain(format!("density {rho} must be positive and finite")));
        }
        Ok(())
    }

    // Unchecked evaluations for solver hot loops (positivity is enforced by
    // the step guards there).
    pub(crate) fn pressure_raw(&self, rho: f64) -> f64 {
        self.pressure_coeff * rho.powf(self.adiabatic_index)
    }

    pub(crate) fn potential_raw(&self, rho: f64) -> f64 {
        let a = self.pressure_coeff;
        let g = self.adiabatic_index;
        if g == 1.0 {
            a * (rho * rho.ln() + 1.0)
        } else {
            a * rho.powf(g) / (g - 1.0)
        }
    }

    pub(crate) fn potential_derivative_raw(&self, rho: f64) -> f64 {
        let a = self.pressure_coeff;
        let g = self.adiabatic_index;
        if g == 1.0 {
            a * (rho.ln() + 1.0)
        } else {
            a * g * rho.powf(g - 1.0) / (g - 1.0)
        }
    }

    pub(crate) fn relative_potential_raw(&self, rho: f64, rho_ref: f64) -> f64 {
        self.potential_raw(rho)
            - self.potential_raw(rho_ref)
            - self.potential_derivative_raw(rho_ref) * (rho - rho_ref)
    }
}

/// Built-in initial-data families.
#[derive(Debug, Clone, PartialEq)]
pub enum DataFamily {
    /// Single x-mode deviations under a Gaussian envelope in y.
    GaussianBump,
    /// A few x-modes with distinct phases under the same envelope.
    FourierModes,
    /// User-supplied profiles on the slab grid ((density, horizontal,
    /// vertical) as 2D tables; normalization and momentum projection are
    /// applied to them).
    CustomTable {
        density: Field2D,
        horizontal: Field2D,
        vertical: Field2D,
    },
}

/// Admissible initial data for the slab and, through the slow embedding, for
/// the 2D flow. Profiles are sampled on `(x, y)` with the slab grids.
///
/// Invariants enforced at construction:
/// * the density profile is strictly positive and `int density dx = 1` at
///   every y node,
/// * both velocity profiles carry zero density-weighted x-mean at every y
///   node,
/// * deviations from `(1, 0, 0)` decay below `decay_floor` of their peak at
///   the edge of the y box.
#[derive(Debug, Clone)]
pub struct InitialDataSpec {
    density: Field2D,
    horizontal: Field2D,
    vertical: Field2D,
    lower_bound: f64,
    upper_bound: f64,
}

/// Relative size the deviations must have dropped to at the box edge.
pub const DECAY_FLOOR: f64 = 1e-10;

/// Construct an admissible initial-data spec on the given slab grids.
///
/// `amplitude` scales the deviations from equilibrium; `y_width` is the
/// Gaussian envelope width. `amplitude = 0` returns the equilibrium spec.
pub fn make_initial_data(
    family: DataFamily,
    amplitude: f64,
    y_width: f64,
    grid_x: GridX,
    grid_y: GridY,
) -> Result<InitialDataSpec> {
    if !amplitude.is_finite() || amplitude < 0.0 {
        return Err(Error::config(format!("amplitude {amplitude} must be finite and >= 0")));
    }
    let grid = Grid2D::new(grid_x, grid_y);
    let (density, horizontal, vertical) = match family {
        DataFamily::GaussianBump => {
            if !(y_width > 0.0) {
                return Err(Error::config("y_width must be positive"));
            }
            let env = move |y: f64| (-y * y / (2.0 * y_width * y_width)).exp();
            let d = Field2D::from_fn(grid, FieldRole::Derived, move |x, y| {
                1.0 + amplitude * (2.0 * PI * x).cos() * env(y)
            });
            let h = Field2D::from_fn(grid, FieldRole::Derived, move |x, y| {
                amplitude * (2.0 * PI * x).sin() * env(y)
            });
            let v = Field2D::from_fn(grid, FieldRole::Derived, move |x, y| {
                amplitude * (4.0 * PI * x).cos() * env(y)
            });
            (d, h, v)
        }
        DataFamily::FourierModes => {
            if !(y_width > 0.0) {
                return Err(Error::config("y_width must be positive"));
            }
            let env = move |y: f64| (-y * y / (2.0 * y_width * y_width)).exp();
            let d = Field2D::from_fn(grid, FieldRole::Derived, move |x, y| {
                1.0 + amplitude
                    * (0.6 * (2.0 * PI * x).cos() + 0.3 * (4.0 * PI * x).sin())
                    * env(y)
            });
            let h = Field2D::from_fn(grid, FieldRole::Derived, move |x, y| {
                amplitude * ((2.0 * PI * x).sin() + 0.4 * (6.0 * PI * x).cos()) * env(y)
            });
            let v = Field2D::from_fn(grid, FieldRole::Derived, move |x, y| {
                amplitude * ((2.0 * PI * x).cos() - 0.5 * (4.0 * PI * x).sin()) * env(y)
            });
            (d, h, v)
        }
        DataFamily::CustomTable {
            density,
            horizontal,
            vertical,
        } => {
            for f in [&density, &horizontal, &vertical] {
                if f.grid() != grid {
                    return Err(Error::mismatch("custom table profiles must live on the slab grid"));
                }
            }
            (density, horizontal, vertical)
        }
    };
    InitialDataSpec::assemble(density, horizontal, vertical)
}

impl InitialDataSpec {
    /// Normalize, project, and validate raw profiles.
    fn assemble(mut density: Field2D, horizontal: Field2D, vertical: Field2D) -> Result<Self> {
        let nx = density.nx();
        let ny = density.ny();
        if density.min() <= 0.0 {
            return Err(Error::domain(
                "initial density not strictly positive (amplitude too large?)".to_string(),
            ));
        }

        // per-row normalization: int density dx = 1 exactly up to rounding
        for iy in 0..ny {
            let row_mean: f64 =
                density.row(iy).iter().sum::<f64>() / nx as f64;
            let start = iy * nx;
            for v in &mut density.as_mut_slice()[start..start + nx] {
                *v /= row_mean;
            }
        }

        // remove the density-weighted x-mean of each velocity row
        let project = |vel: &Field2D, density: &Field2D| -> Field2D {
            let mut out = vel.clone();
            for iy in 0..ny {
                let num: f64 = density
                    .row(iy)
                    .iter()
                    .zip(vel.row(iy))
                    .map(|(&r, &v)| r * v)
                    .sum();
                let den: f64 = density.row(iy).iter().sum();
                let mean = num / den;
                let start = iy * nx;
                for v in &mut out.as_mut_slice()[start..start + nx] {
                    *v -= mean;
                }
            }
            out
        };
        let horizontal = project(&horizontal, &density);
        let vertical = project(&vertical, &density);

        // deviations must have decayed at the edge of the y box
        let grid = density.grid();
        let dev_peak = |f: &Field2D, offset: f64| -> (f64, f64) {
            let mut peak = 0.0f64;
            for v in f.as_slice() {
                peak = peak.max((v - offset).abs());
            }
            let mut edge = 0.0f64;
            for ix in 0..nx {
                edge = edge.max((f.at(ix, 0) - offset).abs());
            }
            (peak, edge)
        };
        for (f, offset) in [(&density, 1.0), (&horizontal, 0.0), (&vertical, 0.0)] {
            let (peak, edge) = dev_peak(f, offset);
            grid.y.check_envelope_decay(edge, peak, DECAY_FLOOR)?;
        }

        let lower_bound = density.min();
        let upper_bound = density.max();
        let density = density.with_role(FieldRole::Density);
        Ok(InitialDataSpec {
            density,
            horizontal: horizontal.with_role(FieldRole::Velocity),
            vertical: vertical.with_role(FieldRole::Velocity),
            lower_bound,
            upper_bound,
        })
    }

    pub fn grid(&self) -> Grid2D {
        self.density.grid()
    }

    /// Density profile `varsigma_0(x, y)`.
    pub fn density(&self) -> &Field2D {
        &self.density
    }

    /// Horizontal velocity profile `w_0(x, y)`.
    pub fn horizontal(&self) -> &Field2D {
        &self.horizontal
    }

    /// Vertical velocity profile (the passive field's data).
    pub fn vertical(&self) -> &Field2D {
        &self.vertical
    }

    /// Realized pointwise lower bound of the density profile.
    pub fn lower_bound(&self) -> f64 {
        self.lower_bound
    }

    /// Realized pointwise upper bound of the density profile.
    pub fn upper_bound(&self) -> f64 {
        self.upper_bound
    }

    /// Deviation moment profile
    /// `A_k(y) = sum_{j=0..2} || d^j/dy^j (density-1, horizontal, vertical) ||^2_{H^k_x}`.
    pub fn a_profile(&self, k: usize) -> Vec<f64> {
        let ny = self.density.ny();
        let mut acc = vec![0.0; ny];
        let dev = self.density.map(|v| v - 1.0);
        for f in [&dev, &self.horizontal, &self.vertical] {
            let mut current = f.clone();
            for j in 0..=2u32 {
                if j > 0 {
                    current = spectral::ddy2(f, j);
                }
                for iy in 0..ny {
                    let row = crate::field::Field1D::derived(
                        self.density.grid().x,
                        current.row(iy).to_vec(),
                    );
                    let n = spectral::norm_hk(&row, k);
                    acc[iy] += n * n;
                }
            }
        }
        acc
    }

    /// Per-row initial energy `E_00(y) = int (w_0^2 density/2 + P(density)) dx`.
    pub fn energy_profile(&self, params: &FluidParams) -> Vec<f64> {
        let nx = self.density.nx();
        let dx = 1.0 / nx as f64;
        (0..self.density.ny())
            .map(|iy| {
                self.density
                    .row(iy)
                    .iter()
                    .zip(self.horizontal.row(iy))
                    .map(|(&r, &w)| 0.5 * r * w * w + params.potential_raw(r))
                    .sum::<f64>()
                    * dx
            })
            .collect()
    }

    /// `sup_y E_00(y)`.
    pub fn energy_sup(&self, params: &FluidParams) -> f64 {
        self.energy_profile(params)
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn params(a: f64, g: f64) -> FluidParams {
        FluidParams::new(a, g, 1.0, 0.5).unwrap()
    }

    #[test]
    fn pressure_values() {
        assert_abs_diff_eq!(params(1.0, 2.0).pressure(1.0).unwrap(), 1.0);
        assert_abs_diff_eq!(params(1.0, 1.0).pressure(3.0).unwrap(), 3.0);
        // hand evaluation of the power law
        assert_abs_diff_eq!(
            params(0.5, 1.4).pressure(2.0).unwrap(),
            0.5 * 2.0f64.powf(1.4),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(params(0.5, 1.4).pressure(2.0).unwrap(), 1.31951, epsilon = 1e-5);
        assert!(params(1.0, 2.0).pressure(0.0).is_err());
        assert!(params(1.0, 2.0).pressure(-1.0).is_err());
    }

    #[test]
    fn potential_values_and_defining_relation() {
        assert_abs_diff_eq!(params(1.0, 2.0).pressure_potential(1.0).unwrap(), 1.0);
        assert_abs_diff_eq!(params(1.0, 1.0).pressure_potential(1.0).unwrap(), 1.0);
        // rho P' - P = p exactly for gamma > 1
        let p = params(1.0, 2.0);
        for rho in [0.5, 1.0, 2.0] {
            let lhs = rho * p.potential_derivative(rho).unwrap()
                - p.pressure_potential(rho).unwrap();
            assert_abs_diff_eq!(lhs, p.pressure(rho).unwrap(), epsilon = 1e-12);
        }
        // finite differences vs analytic P'
        let h = 1e-6;
        for rho in [0.7, 1.3, 3.1] {
            let fd = (p.pressure_potential(rho + h).unwrap()
                - p.pressure_potential(rho - h).unwrap())
                / (2.0 * h);
            let an = p.potential_derivative(rho).unwrap();
            assert!((fd - an).abs() / an.abs() < 1e-8);
        }
        // gamma = 1: rho P' - P = a (rho - 1)
        let p1 = params(2.0, 1.0);
        for rho in [0.5, 1.0, 2.0] {
            let lhs = rho * p1.potential_derivative(rho).unwrap()
                - p1.pressure_potential(rho).unwrap();
            assert_abs_diff_eq!(lhs, 2.0 * (rho - 1.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn relative_potential_values() {
        let p = params(1.0, 2.0);
        assert_eq!(p.relative_potential(1.7, 1.7).unwrap(), 0.0);
        // P = rho^2: 4 - 1 - 2 = 1
        assert_abs_diff_eq!(p.relative_potential(2.0, 1.0).unwrap(), 1.0, epsilon = 1e-14);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for g in [1.0, 1.4, 2.0] {
            let p = params(0.8, g);
            for _ in 0..1000 {
                let rho = rng.gen_range(0.1..10.0);
                let rref = rng.gen_range(0.1..10.0);
                assert!(p.relative_potential(rho, rref).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn relative_potential_is_convex_and_vanishes_only_at_ref() {
        let p = params(1.0, 1.4);
        let rref = 1.3;
        let h = 0.01;
        let mut prev = None;
        for i in 1..200 {
            let rho = 0.2 + i as f64 * h;
            let v = p.relative_potential(rho, rref).unwrap();
            if (rho - rref).abs() > 2.0 * h {
                assert!(v > 0.0, "rel potential should vanish only at rho_ref");
            }
            // second differences nonnegative
            let vm = p.relative_potential(rho - h, rref).unwrap();
            let vp = p.relative_potential(rho + h, rref).unwrap();
            assert!(vp - 2.0 * v + vm >= -1e-12);
            prev = Some(v);
        }
        let _ = prev;
    }

    #[test]
    fn params_invariants() {
        assert!(FluidParams::new(0.0, 2.0, 1.0, 0.0).is_err());
        assert!(FluidParams::new(1.0, 2.5, 1.0, 0.0).is_err());
        assert!(FluidParams::new(1.0, 2.0, 0.0, 1.0).is_err());
        assert!(FluidParams::new(1.0, 2.0, 1.0, -2.0).is_err());
        let p = FluidParams::new(1.0, 2.0, 1.0, -0.5).unwrap();
        assert_eq!(p.nu(), 0.5);
        assert!(FluidParams::new(0.5, 2.0, 1.0, 0.0).unwrap().is_pressure_normalized());
        assert!(!FluidParams::new(1.0, 2.0, 1.0, 0.0).unwrap().is_pressure_normalized());
    }

    fn slab_grids() -> (GridX, GridY) {
        (GridX::new(64).unwrap(), GridY::new(33, 10.0).unwrap())
    }

    #[test]
    fn equilibrium_family() {
        let (gx, gy) = slab_grids();
        let spec = make_initial_data(DataFamily::GaussianBump, 0.0, 1.4, gx, gy).unwrap();
        assert_eq!(spec.density().max(), 1.0);
        assert_eq!(spec.density().min(), 1.0);
        assert_eq!(spec.horizontal().max_abs(), 0.0);
        assert_eq!(spec.vertical().max_abs(), 0.0);
    }

    #[test]
    fn gaussian_bump_is_admissible() {
        let (gx, gy) = slab_grids();
        let spec = make_initial_data(DataFamily::GaussianBump, 0.3, 1.4, gx, gy).unwrap();
        let nx = gx.len();
        for iy in 0..gy.len() {
            let mass: f64 = spec.density().row(iy).iter().sum::<f64>() / nx as f64;
            assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-12);
            for vel in [spec.horizontal(), spec.vertical()] {
                let mom: f64 = spec
                    .density()
                    .row(iy)
                    .iter()
                    .zip(vel.row(iy))
                    .map(|(&r, &w)| r * w)
                    .sum::<f64>()
                    / nx as f64;
                assert!(mom.abs() < 1e-12);
            }
        }
        assert!(spec.lower_bound() > 0.0);
        assert!(spec.upper_bound() < 1.5);
    }

    #[test]
    fn fourier_modes_momentum_free() {
        let (gx, gy) = slab_grids();
        let spec = make_initial_data(DataFamily::FourierModes, 0.25, 1.4, gx, gy).unwrap();
        let nx = gx.len();
        for iy in 0..gy.len() {
            let mom: f64 = spec
                .density()
                .row(iy)
                .iter()
                .zip(spec.horizontal().row(iy))
                .map(|(&r, &w)| r * w)
                .sum::<f64>()
                / nx as f64;
            assert!(mom.abs() < 1e-12);
        }
    }

    #[test]
    fn oversized_amplitude_rejected() {
        let (gx, gy) = slab_grids();
        assert!(make_initial_data(DataFamily::GaussianBump, 1.05, 1.4, gx, gy).is_err());
    }

    #[test]
    fn wide_envelope_rejected() {
        let (gx, gy) = slab_grids();
        // width comparable to the box: no decay at the edge
        assert!(make_initial_data(DataFamily::GaussianBump, 0.3, 6.0, gx, gy).is_err());
    }

    #[test]
    fn a_profile_finite_and_peaked_at_center() {
        let (gx, gy) = slab_grids();
        let spec = make_initial_data(DataFamily::GaussianBump, 0.3, 1.4, gx, gy).unwrap();
        let a4 = spec.a_profile(4);
        assert!(a4.iter().all(|v| v.is_finite() && *v >= 0.0));
        let center = gy.len() / 2;
        let max = a4.iter().cloned().fold(f64::MIN, f64::max);
        assert!(a4[center] > 0.5 * max);
        assert!(a4[0] < 1e-8 * max);
    }

    #[test]
    fn energy_sup_equilibrium() {
        let (gx, gy) = slab_grids();
        let spec = make_initial_data(DataFamily::GaussianBump, 0.0, 1.4, gx, gy).unwrap();
        // E_00 = P(1) = a (rho log rho + 1) = a at gamma = 1
        let p = FluidParams::new(1.0, 1.0, 1.0, 0.5).unwrap();
        assert_abs_diff_eq!(spec.energy_sup(&p), 1.0, epsilon = 1e-14);
    }
}

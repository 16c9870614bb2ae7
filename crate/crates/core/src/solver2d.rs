//! Time integration of the full 2D isentropic system on the periodic box,
//! with slow-variable initial data.
//!
//! ```text
//! d/dt rho + div(rho u)                                   = 0
//! d/dt (rho u) + div(rho u x u) - mu Lap u
//!              - mu' grad(div u) + grad p(rho)            = 0
//! ```
//!
//! As in the 1D solver the prognostics are conservative (`rho`, `M = rho u`),
//! so every right-hand side is a derivative and total mass and momentum ride
//! along bitwise. The implicit part of the IMEX step is the majorized
//! constant-coefficient viscous operator `c (mu Lap + mu' grad div)` applied
//! to `M`, inverted mode-by-mode through an explicit 2x2 formula.

use crate::error::{Error, Result};
use crate::field::{Field2D, FieldRole};
use crate::grid::Grid2D;
use crate::model::{FluidParams, InitialDataSpec};
use crate::solver1d::{Scheme, SolverConfig1D};
use crate::spectral::{self, Transform};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use std::sync::Arc;

/// The 2D solver shares the 1D solver's configuration knobs.
pub type SolverConfig2D = SolverConfig1D;

const IMPLICIT_MARGIN: f64 = 1.5;

/// Slow-variable parameter `eps in (0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsScaling {
    eps: f64,
}

impl EpsScaling {
    pub fn new(eps: f64) -> Result<Self> {
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(Error::config(format!("eps = {eps} must lie in (0, 1]")));
        }
        Ok(EpsScaling { eps })
    }

    pub fn value(&self) -> f64 {
        self.eps
    }
}

/// Full 2D state at one time.
#[derive(Debug, Clone)]
pub struct State2D {
    pub density: Field2D,
    pub velocity_x: Field2D,
    pub velocity_y: Field2D,
    pub time: f64,
}

impl State2D {
    pub fn new(
        density: Field2D,
        velocity_x: Field2D,
        velocity_y: Field2D,
        time: f64,
    ) -> Result<Self> {
        spectral::require_same_grid(&density, &velocity_x)?;
        spectral::require_same_grid(&density, &velocity_y)?;
        if density.min() <= 0.0 {
            return Err(Error::domain("2D density must be strictly positive"));
        }
        Ok(State2D {
            density,
            velocity_x,
            velocity_y,
            time,
        })
    }

    pub fn equilibrium(grid: Grid2D) -> Self {
        State2D {
            density: Field2D::constant(grid, 1.0).with_role(FieldRole::Density),
            velocity_x: Field2D::zeros(grid).with_role(FieldRole::Velocity),
            velocity_y: Field2D::zeros(grid).with_role(FieldRole::Velocity),
            time: 0.0,
        }
    }

    pub fn grid(&self) -> Grid2D {
        self.density.grid()
    }

    pub fn total_mass(&self) -> f64 {
        spectral::integrate_xy(&self.density)
    }

    pub fn total_momentum(&self) -> (f64, f64) {
        (
            spectral::integrate_xy(&self.density.zip_with(&self.velocity_x, |r, u| r * u)),
            spectral::integrate_xy(&self.density.zip_with(&self.velocity_y, |r, u| r * u)),
        )
    }

    /// `int ( rho |u|^2 / 2 + P(rho) ) dx dy`.
    pub fn energy(&self, params: &FluidParams) -> f64 {
        let cell = self.grid().cell();
        self.density
            .as_slice()
            .iter()
            .zip(self.velocity_x.as_slice())
            .zip(self.velocity_y.as_slice())
            .map(|((&r, &u1), &u2)| 0.5 * r * (u1 * u1 + u2 * u2) + params.potential_raw(r))
            .sum::<f64>()
            * cell
    }

    /// `int ( mu |grad u|^2 + mu' (div u)^2 ) dx dy`.
    pub fn dissipation(&self, params: &FluidParams) -> f64 {
        let gu = spectral::grad_norm_sq(&self.velocity_x) + spectral::grad_norm_sq(&self.velocity_y);
        let div = spectral::ddx2d(&self.velocity_x)
            .zip_with(&spectral::ddy2d(&self.velocity_y), |a, b| a + b);
        let div2 = spectral::integrate_xy(&div.zip_with(&div, |a, b| a * b));
        params.shear_viscosity * gu + params.bulk_viscosity * div2
    }
}

/// `grad_eps f = (df/dx, eps df/dy)`.
pub fn grad_eps(f: &Field2D, eps: EpsScaling) -> (Field2D, Field2D) {
    let fx = spectral::ddx2d(f);
    let fy = spectral::ddy2d(f).map(|v| eps.value() * v);
    (fx, fy)
}

/// `lap_eps f = d2f/dx2 + eps^2 d2f/dy2`.
pub fn laplace_eps(f: &Field2D, eps: EpsScaling) -> Field2D {
    let fxx = spectral::ddx2(f, 2);
    let fyy = spectral::ddy2(f, 2);
    let e2 = eps.value() * eps.value();
    fxx.zip_with(&fyy, |a, b| a + e2 * b)
}

/// Embed initial data by the slow-variable map `f(x, y) -> f(x, eps y)`:
/// slab profiles are trig-interpolated at the slow coordinate of every
/// target row, then spectrally resampled in x.
pub fn slow_embed(spec: &InitialDataSpec, eps: EpsScaling, grid2d: Grid2D) -> Result<State2D> {
    let emb = SlowEmbedder::new(spec.grid(), grid2d, eps)?;
    Ok(State2D {
        density: emb.embed(spec.density()).with_role(FieldRole::Density),
        velocity_x: emb.embed(spec.horizontal()).with_role(FieldRole::Velocity),
        velocity_y: emb.embed(spec.vertical()).with_role(FieldRole::Velocity),
        time: 0.0,
    })
}

/// Resampler from slab-grid profiles onto a 2D grid at slow coordinates.
pub struct SlowEmbedder {
    slab_grid: Grid2D,
    target: Grid2D,
    /// per target row: mode phases of the slab y-transform at `eps * y_row`
    phases: Vec<Vec<Complex64>>,
}

impl SlowEmbedder {
    pub fn new(slab_grid: Grid2D, target: Grid2D, eps: EpsScaling) -> Result<Self> {
        let l1 = slab_grid.y.half_length();
        let available = eps.value() * target.y.half_length();
        if available + 1e-9 * l1 < l1 {
            return Err(Error::BoxTooSmall {
                available,
                needed: l1,
            });
        }
        let ny1 = slab_grid.y.len();
        let phases = (0..target.y.len())
            .map(|iy| {
                let slow = eps.value() * target.y.node(iy);
                // wrap onto the periodic slab box
                let theta = 2.0 * std::f64::consts::PI * (slow + l1) / (2.0 * l1);
                spectral::mode_phases(ny1, theta)
            })
            .collect();
        Ok(SlowEmbedder {
            slab_grid,
            target,
            phases,
        })
    }

    pub fn target(&self) -> Grid2D {
        self.target
    }

    /// Embed one slab profile (`f(x, y)` on the slab grid) as
    /// `f(x, eps y)` on the target grid.
    pub fn embed(&self, profile: &Field2D) -> Field2D {
        assert_eq!(profile.grid(), self.slab_grid, "profile not on the slab grid");
        let nx1 = self.slab_grid.x.len();
        let ny1 = self.slab_grid.y.len();
        let nx2 = self.target.x.len();
        let ty = Transform::get(ny1);
        // y-spectra of every x-column
        let col_coeffs: Vec<Vec<Complex64>> = (0..nx1)
            .into_par_iter()
            .map(|ix| {
                let col: Vec<f64> = (0..ny1).map(|iy| profile.at(ix, iy)).collect();
                ty.coeffs(&col)
            })
            .collect();
        let rows: Vec<Vec<f64>> = self
            .phases
            .par_iter()
            .map(|phase| {
                let slab_row: Vec<f64> = (0..nx1)
                    .map(|ix| spectral::eval_with_phases(&col_coeffs[ix], phase))
                    .collect();
                spectral::resample_periodic(&slab_row, nx2)
            })
            .collect();
        let mut data = Vec::with_capacity(nx2 * self.target.y.len());
        for row in rows {
            data.extend_from_slice(&row);
        }
        Field2D::derived(self.target, data)
    }
}

/// Optional manufactured source `(t, x, y) -> (S_rho, S_m1, S_m2)`.
pub type Source2D = Arc<dyn Fn(f64, f64, f64) -> (f64, f64, f64) + Send + Sync>;

/// Acoustic CFL bound on the 2D grid.
pub fn cfl_dt_2d(state: &State2D, params: &FluidParams, cfg: &SolverConfig2D) -> f64 {
    let c_max = params
        .sound_speed(state.density.max())
        .unwrap_or(f64::INFINITY);
    let u_max = state
        .velocity_x
        .max_abs()
        .max(state.velocity_y.max_abs());
    let h = state.grid().x.dx().min(state.grid().y.dy());
    cfg.cfl_safety * h / (u_max + c_max).max(1e-12)
}

// ---------------------------------------------------------------------------
// 2D FFT helper
// ---------------------------------------------------------------------------

fn transpose(a: &[Complex64], nrows: usize, ncols: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); a.len()];
    for r in 0..nrows {
        for c in 0..ncols {
            out[c * nrows + r] = a[r * ncols + c];
        }
    }
    out
}

#[derive(Clone)]
struct Fft2 {
    nx: usize,
    ny: usize,
    tx: Transform,
    ty: Transform,
}

impl Fft2 {
    fn new(nx: usize, ny: usize) -> Self {
        Fft2 {
            nx,
            ny,
            tx: Transform::get(nx),
            ty: Transform::get(ny),
        }
    }

    /// Full 2D coefficients (normalized), row-major `[iy * nx + ix]`.
    fn forward(&self, samples: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        buf.par_chunks_mut(self.nx)
            .for_each(|row| self.tx.coeffs_inplace(row));
        let mut t = transpose(&buf, self.ny, self.nx);
        t.par_chunks_mut(self.ny)
            .for_each(|col| self.ty.coeffs_inplace(col));
        transpose(&t, self.nx, self.ny)
    }

    fn inverse(&self, spec: &[Complex64]) -> Vec<f64> {
        let mut t = transpose(spec, self.ny, self.nx);
        t.par_chunks_mut(self.ny)
            .for_each(|col| self.ty.samples_inplace(col));
        let mut buf = transpose(&t, self.nx, self.ny);
        buf.par_chunks_mut(self.nx)
            .for_each(|row| self.tx.samples_inplace(row));
        buf.into_iter().map(|c| c.re).collect()
    }
}

// ---------------------------------------------------------------------------
// Stepper
// ---------------------------------------------------------------------------

#[derive(Clone)]
struct Fields2 {
    rho: Vec<f64>,
    m1: Vec<f64>,
    m2: Vec<f64>,
    rho_hat: Vec<Complex64>,
    m1_hat: Vec<Complex64>,
    m2_hat: Vec<Complex64>,
    t: f64,
}

#[derive(Clone)]
struct Rhs2 {
    rho: Vec<Complex64>,
    m1: Vec<Complex64>,
    m2: Vec<Complex64>,
}

struct Stepper2D {
    params: FluidParams,
    cfg: SolverConfig2D,
    grid: Grid2D,
    fft: Fft2,
    /// wavenumber of every mode, 0 at the Nyquist bins
    kx: Vec<f64>,
    ky: Vec<f64>,
    dealias_keep_x: i64,
    dealias_keep_y: i64,
    c_visc: f64,
    source: Option<Source2D>,
}

impl Stepper2D {
    fn new(params: FluidParams, cfg: SolverConfig2D, grid: Grid2D) -> Self {
        let nx = grid.x.len();
        let ny = grid.y.len();
        let kx = (0..nx)
            .map(|j| {
                if spectral::is_nyquist(j, nx) {
                    0.0
                } else {
                    grid.x.wavenumber(spectral::mode_index(j, nx))
                }
            })
            .collect();
        let ky = (0..ny)
            .map(|j| {
                if spectral::is_nyquist(j, ny) {
                    0.0
                } else {
                    grid.y.wavenumber(spectral::mode_index(j, ny))
                }
            })
            .collect();
        Stepper2D {
            params,
            cfg,
            grid,
            fft: Fft2::new(nx, ny),
            kx,
            ky,
            dealias_keep_x: (nx / 3) as i64,
            dealias_keep_y: (ny / 3) as i64,
            c_visc: 0.0,
            source: None,
        }
    }

    fn refresh_c_visc(&mut self, rho: &[f64]) {
        let inv_max = rho.iter().fold(0.0f64, |m, &r| m.max(1.0 / r));
        self.c_visc = IMPLICIT_MARGIN * inv_max;
    }

    fn fields_from_state(&self, s: &State2D) -> Fields2 {
        let rho = s.density.as_slice().to_vec();
        let m1: Vec<f64> = rho
            .iter()
            .zip(s.velocity_x.as_slice())
            .map(|(&r, &u)| r * u)
            .collect();
        let m2: Vec<f64> = rho
            .iter()
            .zip(s.velocity_y.as_slice())
            .map(|(&r, &u)| r * u)
            .collect();
        Fields2 {
            rho_hat: self.fft.forward(&rho),
            m1_hat: self.fft.forward(&m1),
            m2_hat: self.fft.forward(&m2),
            rho,
            m1,
            m2,
            t: s.time,
        }
    }

    fn state_from_fields(&self, f: &Fields2) -> State2D {
        let u1: Vec<f64> = f.m1.iter().zip(&f.rho).map(|(&m, &r)| m / r).collect();
        let u2: Vec<f64> = f.m2.iter().zip(&f.rho).map(|(&m, &r)| m / r).collect();
        State2D {
            density: Field2D::derived(self.grid, f.rho.clone()).with_role(FieldRole::Density),
            velocity_x: Field2D::derived(self.grid, u1),
            velocity_y: Field2D::derived(self.grid, u2),
            time: f.t,
        }
    }

    fn dealias(&self, spec: &mut [Complex64]) {
        let nx = self.grid.x.len();
        let ny = self.grid.y.len();
        for iy in 0..ny {
            let my = spectral::mode_index(iy, ny).abs();
            let kill_row = my > self.dealias_keep_y;
            for ix in 0..nx {
                if kill_row || spectral::mode_index(ix, nx).abs() > self.dealias_keep_x {
                    spec[iy * nx + ix] = Complex64::new(0.0, 0.0);
                }
            }
        }
    }

    fn rhs_hat(&self, f: &Fields2) -> Rhs2 {
        let nx = self.grid.x.len();
        let ny = self.grid.y.len();
        let n = nx * ny;
        let mu = self.params.shear_viscosity;
        let mup = self.params.bulk_viscosity;

        let mut u1 = vec![0.0; n];
        let mut u2 = vec![0.0; n];
        let mut m1u1 = vec![0.0; n];
        let mut m1u2 = vec![0.0; n];
        let mut m2u1 = vec![0.0; n];
        let mut m2u2 = vec![0.0; n];
        let mut pres = vec![0.0; n];
        for j in 0..n {
            let r = f.rho[j];
            let v1 = f.m1[j] / r;
            let v2 = f.m2[j] / r;
            u1[j] = v1;
            u2[j] = v2;
            m1u1[j] = f.m1[j] * v1;
            m1u2[j] = f.m1[j] * v2;
            m2u1[j] = f.m2[j] * v1;
            m2u2[j] = f.m2[j] * v2;
            pres[j] = self.params.pressure_raw(r);
        }
        let p_mean = pres.iter().sum::<f64>() / n as f64;
        for v in &mut pres {
            *v -= p_mean;
        }

        let mut m1u1_hat = self.fft.forward(&m1u1);
        let mut m1u2_hat = self.fft.forward(&m1u2);
        let mut m2u1_hat = self.fft.forward(&m2u1);
        let mut m2u2_hat = self.fft.forward(&m2u2);
        let mut p_hat = self.fft.forward(&pres);
        let u1_hat = self.fft.forward(&u1);
        let u2_hat = self.fft.forward(&u2);
        if self.cfg.dealias {
            self.dealias(&mut m1u1_hat);
            self.dealias(&mut m1u2_hat);
            self.dealias(&mut m2u1_hat);
            self.dealias(&mut m2u2_hat);
            self.dealias(&mut p_hat);
        }

        let c = self.c_visc;
        let mut rho_f = vec![Complex64::new(0.0, 0.0); n];
        let mut m1_f = vec![Complex64::new(0.0, 0.0); n];
        let mut m2_f = vec![Complex64::new(0.0, 0.0); n];
        for iy in 0..ny {
            let ky = self.ky[iy];
            for ix in 0..nx {
                let j = iy * nx + ix;
                let kx = self.kx[ix];
                let ikx = Complex64::new(0.0, kx);
                let iky = Complex64::new(0.0, ky);
                let k2 = kx * kx + ky * ky;

                rho_f[j] = -(ikx * f.m1_hat[j] + iky * f.m2_hat[j]);

                let div_u = ikx * u1_hat[j] + iky * u2_hat[j];
                let div_m = ikx * f.m1_hat[j] + iky * f.m2_hat[j];
                m1_f[j] = -(ikx * (m1u1_hat[j] + p_hat[j]) + iky * m1u2_hat[j])
                    - mu * k2 * u1_hat[j]
                    + mup * ikx * div_u
                    + c * (mu * k2 * f.m1_hat[j] - mup * ikx * div_m);
                m2_f[j] = -(ikx * m2u1_hat[j] + iky * (m2u2_hat[j] + p_hat[j]))
                    - mu * k2 * u2_hat[j]
                    + mup * iky * div_u
                    + c * (mu * k2 * f.m2_hat[j] - mup * iky * div_m);
            }
        }

        if let Some(src) = &self.source {
            let mut s_rho = vec![0.0; n];
            let mut s_m1 = vec![0.0; n];
            let mut s_m2 = vec![0.0; n];
            for iy in 0..ny {
                let y = self.grid.y.node(iy);
                for ix in 0..nx {
                    let (a, b, cc) = src(f.t, self.grid.x.node(ix), y);
                    s_rho[iy * nx + ix] = a;
                    s_m1[iy * nx + ix] = b;
                    s_m2[iy * nx + ix] = cc;
                }
            }
            for (fv, sv) in [
                (&mut rho_f, &s_rho),
                (&mut m1_f, &s_m1),
                (&mut m2_f, &s_m2),
            ] {
                for (a, b) in fv.iter_mut().zip(self.fft.forward(sv)) {
                    *a += b;
                }
            }
        }

        Rhs2 {
            rho: rho_f,
            m1: m1_f,
            m2: m2_f,
        }
    }

    fn check_candidate(&self, rho: &[f64], m1: &[f64], m2: &[f64], t: f64) -> Result<()> {
        for v in rho.iter().chain(m1).chain(m2) {
            if !v.is_finite() {
                return Err(Error::Blowup {
                    time: t,
                    slice: usize::MAX,
                });
            }
        }
        if rho.iter().any(|&r| r <= self.cfg.positivity_floor) {
            return Err(Error::PositivityLoss {
                time: t,
                slice: usize::MAX,
            });
        }
        Ok(())
    }

    fn finish(
        &self,
        rho_hat: Vec<Complex64>,
        m1_hat: Vec<Complex64>,
        m2_hat: Vec<Complex64>,
        t: f64,
    ) -> Result<Fields2> {
        let rho = self.fft.inverse(&rho_hat);
        let m1 = self.fft.inverse(&m1_hat);
        let m2 = self.fft.inverse(&m2_hat);
        self.check_candidate(&rho, &m1, &m2, t)?;
        Ok(Fields2 {
            rho,
            m1,
            m2,
            rho_hat,
            m1_hat,
            m2_hat,
            t,
        })
    }

    /// Solve `(s I + r k k^T) M = rhs` per mode (Sherman-Morrison).
    #[inline]
    fn solve_visc(
        s: f64,
        r: f64,
        kx: f64,
        ky: f64,
        rhs1: Complex64,
        rhs2: Complex64,
    ) -> (Complex64, Complex64) {
        let k2 = kx * kx + ky * ky;
        let kr = kx * rhs1 + ky * rhs2;
        let factor = r / (s + r * k2);
        (
            (rhs1 - factor * kr * kx) / s,
            (rhs2 - factor * kr * ky) / s,
        )
    }

    fn step_midpoint(&self, cur: &Fields2, dt: f64) -> Result<(Fields2, Rhs2)> {
        let nx = self.grid.x.len();
        let ny = self.grid.y.len();
        let n = nx * ny;
        let mu = self.params.shear_viscosity;
        let mup = self.params.bulk_viscosity;
        let c = self.c_visc;
        let f0 = self.rhs_hat(cur);
        let half = 0.5 * dt;

        let mut rho_mid = vec![Complex64::new(0.0, 0.0); n];
        let mut m1_mid = vec![Complex64::new(0.0, 0.0); n];
        let mut m2_mid = vec![Complex64::new(0.0, 0.0); n];
        for iy in 0..ny {
            let ky = self.ky[iy];
            for ix in 0..nx {
                let j = iy * nx + ix;
                let kx = self.kx[ix];
                let k2 = kx * kx + ky * ky;
                rho_mid[j] = cur.rho_hat[j] + half * f0.rho[j];
                let s = 1.0 + half * c * mu * k2;
                let r = half * c * mup;
                let (a, b) = Self::solve_visc(
                    s,
                    r,
                    kx,
                    ky,
                    cur.m1_hat[j] + half * f0.m1[j],
                    cur.m2_hat[j] + half * f0.m2[j],
                );
                m1_mid[j] = a;
                m2_mid[j] = b;
            }
        }
        let mid = self.finish(rho_mid, m1_mid, m2_mid, cur.t + half)?;
        let fm = self.rhs_hat(&mid);

        // Crank-Nicolson on the implicit majorant, midpoint on the rest:
        // (I + dt/2 cA) M_new = (I - dt/2 cA) M_old + dt N(M*)
        let mut rho_new = vec![Complex64::new(0.0, 0.0); n];
        let mut m1_new = vec![Complex64::new(0.0, 0.0); n];
        let mut m2_new = vec![Complex64::new(0.0, 0.0); n];
        for iy in 0..ny {
            let ky = self.ky[iy];
            for ix in 0..nx {
                let j = iy * nx + ix;
                let kx = self.kx[ix];
                let k2 = kx * kx + ky * ky;
                rho_new[j] = cur.rho_hat[j] + dt * fm.rho[j];
                // (I - dt/2 cA) M_old with A = mu k^2 I + mu' k k^T
                let km = kx * cur.m1_hat[j] + ky * cur.m2_hat[j];
                let a1 = c * (mu * k2 * cur.m1_hat[j] + mup * kx * km);
                let a2 = c * (mu * k2 * cur.m2_hat[j] + mup * ky * km);
                let rhs1 = cur.m1_hat[j] - half * a1 + dt * fm.m1[j];
                let rhs2 = cur.m2_hat[j] - half * a2 + dt * fm.m2[j];
                let s = 1.0 + half * c * mu * k2;
                let r = half * c * mup;
                let (b1, b2) = Self::solve_visc(s, r, kx, ky, rhs1, rhs2);
                m1_new[j] = b1;
                m2_new[j] = b2;
            }
        }
        if self.source.is_none() {
            rho_new[0] = cur.rho_hat[0];
            m1_new[0] = cur.m1_hat[0];
            m2_new[0] = cur.m2_hat[0];
        }
        let new = self.finish(rho_new, m1_new, m2_new, cur.t + dt)?;
        Ok((new, f0))
    }

    fn step_bdf2(
        &self,
        prev: &Fields2,
        prev_rhs: &Rhs2,
        cur: &Fields2,
        dt: f64,
    ) -> Result<(Fields2, Rhs2)> {
        let nx = self.grid.x.len();
        let ny = self.grid.y.len();
        let n = nx * ny;
        let mu = self.params.shear_viscosity;
        let mup = self.params.bulk_viscosity;
        let c = self.c_visc;
        let cur_rhs = self.rhs_hat(cur);
        let two_dt = 2.0 * dt;

        let mut rho_new = vec![Complex64::new(0.0, 0.0); n];
        let mut m1_new = vec![Complex64::new(0.0, 0.0); n];
        let mut m2_new = vec![Complex64::new(0.0, 0.0); n];
        for iy in 0..ny {
            let ky = self.ky[iy];
            for ix in 0..nx {
                let j = iy * nx + ix;
                let kx = self.kx[ix];
                let k2 = kx * kx + ky * ky;
                rho_new[j] = (4.0 * cur.rho_hat[j] - prev.rho_hat[j]
                    + two_dt * (2.0 * cur_rhs.rho[j] - prev_rhs.rho[j]))
                    / 3.0;
                let s = 3.0 + two_dt * c * mu * k2;
                let r = two_dt * c * mup;
                let (a, b) = Self::solve_visc(
                    s,
                    r,
                    kx,
                    ky,
                    4.0 * cur.m1_hat[j] - prev.m1_hat[j]
                        + two_dt * (2.0 * cur_rhs.m1[j] - prev_rhs.m1[j]),
                    4.0 * cur.m2_hat[j] - prev.m2_hat[j]
                        + two_dt * (2.0 * cur_rhs.m2[j] - prev_rhs.m2[j]),
                );
                m1_new[j] = a;
                m2_new[j] = b;
            }
        }
        if self.source.is_none() {
            rho_new[0] = cur.rho_hat[0];
            m1_new[0] = cur.m1_hat[0];
            m2_new[0] = cur.m2_hat[0];
        }
        let new = self.finish(rho_new, m1_new, m2_new, cur.t + dt)?;
        Ok((new, cur_rhs))
    }

    fn step_rk4(&self, cur: &Fields2, dt: f64) -> Result<(Fields2, Rhs2)> {
        let n = self.grid.node_count();
        let full = Stepper2D {
            params: self.params,
            cfg: self.cfg,
            grid: self.grid,
            fft: self.fft.clone(),
            kx: self.kx.clone(),
            ky: self.ky.clone(),
            dealias_keep_x: self.dealias_keep_x,
            dealias_keep_y: self.dealias_keep_y,
            c_visc: 0.0,
            source: self.source.clone(),
        };
        let eval = |rho_hat: &[Complex64],
                    m1_hat: &[Complex64],
                    m2_hat: &[Complex64],
                    t: f64|
         -> Result<Rhs2> {
            let rho = full.fft.inverse(rho_hat);
            let m1 = full.fft.inverse(m1_hat);
            let m2 = full.fft.inverse(m2_hat);
            full.check_candidate(&rho, &m1, &m2, t)?;
            Ok(full.rhs_hat(&Fields2 {
                rho,
                m1,
                m2,
                rho_hat: rho_hat.to_vec(),
                m1_hat: m1_hat.to_vec(),
                m2_hat: m2_hat.to_vec(),
                t,
            }))
        };
        let comb = |a: &[Complex64], b: &[Complex64], s: f64| -> Vec<Complex64> {
            a.iter().zip(b).map(|(&x, &y)| x + s * y).collect()
        };
        let k1 = full.rhs_hat(cur);
        let k2 = eval(
            &comb(&cur.rho_hat, &k1.rho, 0.5 * dt),
            &comb(&cur.m1_hat, &k1.m1, 0.5 * dt),
            &comb(&cur.m2_hat, &k1.m2, 0.5 * dt),
            cur.t + 0.5 * dt,
        )?;
        let k3 = eval(
            &comb(&cur.rho_hat, &k2.rho, 0.5 * dt),
            &comb(&cur.m1_hat, &k2.m1, 0.5 * dt),
            &comb(&cur.m2_hat, &k2.m2, 0.5 * dt),
            cur.t + 0.5 * dt,
        )?;
        let k4 = eval(
            &comb(&cur.rho_hat, &k3.rho, dt),
            &comb(&cur.m1_hat, &k3.m1, dt),
            &comb(&cur.m2_hat, &k3.m2, dt),
            cur.t + dt,
        )?;
        let sixth = dt / 6.0;
        let mut rho_new = vec![Complex64::new(0.0, 0.0); n];
        let mut m1_new = vec![Complex64::new(0.0, 0.0); n];
        let mut m2_new = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            rho_new[j] = cur.rho_hat[j]
                + sixth * (k1.rho[j] + 2.0 * k2.rho[j] + 2.0 * k3.rho[j] + k4.rho[j]);
            m1_new[j] =
                cur.m1_hat[j] + sixth * (k1.m1[j] + 2.0 * k2.m1[j] + 2.0 * k3.m1[j] + k4.m1[j]);
            m2_new[j] =
                cur.m2_hat[j] + sixth * (k1.m2[j] + 2.0 * k2.m2[j] + 2.0 * k3.m2[j] + k4.m2[j]);
        }
        if self.source.is_none() {
            rho_new[0] = cur.rho_hat[0];
            m1_new[0] = cur.m1_hat[0];
            m2_new[0] = cur.m2_hat[0];
        }
        let new = self.finish(rho_new, m1_new, m2_new, cur.t + dt)?;
        Ok((new, k1))
    }
}

/// One-shot second-order IMEX step of the full system.
pub fn step_full(state: &State2D, params: &FluidParams, cfg: &SolverConfig2D) -> Result<State2D> {
    cfg.validate()?;
    let dt = cfg.dt.unwrap_or_else(|| cfl_dt_2d(state, params, cfg));
    let mut stepper = Stepper2D::new(*params, *cfg, state.grid());
    stepper.refresh_c_visc(state.density.as_slice());
    let fields = stepper.fields_from_state(state);
    let (new, _) = match cfg.scheme {
        Scheme::ImexBdf2 => stepper.step_midpoint(&fields, dt)?,
        Scheme::Rk4Explicit => stepper.step_rk4(&fields, dt)?,
    };
    Ok(stepper.state_from_fields(&new))
}

/// Incremental driver for long 2D runs (BDF2 with midpoint startup, step
/// rejection with dt halving, exact landing on sample times).
pub struct Integrator2D {
    stepper: Stepper2D,
    cur: Fields2,
    prev: Option<(Fields2, Rhs2)>,
    dt: f64,
    halvings: u32,
}

impl Integrator2D {
    pub fn new(initial: &State2D, params: &FluidParams, cfg: &SolverConfig2D) -> Result<Self> {
        cfg.validate()?;
        let dt = cfg.dt.unwrap_or_else(|| cfl_dt_2d(initial, params, cfg));
        let mut stepper = Stepper2D::new(*params, *cfg, initial.grid());
        stepper.refresh_c_visc(initial.density.as_slice());
        let cur = stepper.fields_from_state(initial);
        Ok(Integrator2D {
            stepper,
            cur,
            prev: None,
            dt,
            halvings: 0,
        })
    }

    pub fn with_source(mut self, source: Source2D) -> Self {
        self.stepper.source = Some(source);
        self
    }

    /// Clamp the base step so it divides `sample_dt` evenly.
    pub fn align_dt(&mut self, sample_dt: f64) {
        let steps = (sample_dt / self.dt - 1e-9).ceil().max(1.0);
        self.dt = sample_dt / steps;
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn set_dt(&mut self, dt: f64) {
        self.dt = dt;
        self.prev = None;
    }

    pub fn time(&self) -> f64 {
        self.cur.t
    }

    fn restart(&mut self) {
        self.prev = None;
        self.stepper.refresh_c_visc(&self.cur.rho);
    }

    fn one_step(&mut self) -> Result<()> {
        let result = match (self.stepper.cfg.scheme, &self.prev) {
            (Scheme::Rk4Explicit, _) => self.stepper.step_rk4(&self.cur, self.dt),
            (Scheme::ImexBdf2, None) => self.stepper.step_midpoint(&self.cur, self.dt),
            (Scheme::ImexBdf2, Some((prev, prev_rhs))) => {
                let p = prev.clone();
                let r = prev_rhs.clone();
                self.stepper.step_bdf2(&p, &r, &self.cur, self.dt)
            }
        };
        match result {
            Ok((new, cur_rhs)) => {
                let old = std::mem::replace(&mut self.cur, new);
                self.prev = Some((old, cur_rhs));
                Ok(())
            }
            Err(e @ Error::PositivityLoss { .. }) => {
                if self.halvings >= self.stepper.cfg.max_halvings {
                    return Err(e);
                }
                self.halvings += 1;
                self.dt *= 0.5;
                self.restart();
                self.one_step()
            }
            Err(e) => Err(e),
        }
    }

    pub fn advance_to(&mut self, t_target: f64) -> Result<()> {
        loop {
            let remaining = t_target - self.cur.t;
            if remaining <= 1e-9 * self.dt {
                break;
            }
            let n_steps = (remaining / self.dt).round().max(1.0);
            let h = remaining / n_steps;
            if (h - self.dt).abs() > 1e-9 * self.dt {
                self.dt = h;
                self.restart();
            }
            for _ in 0..n_steps as usize {
                let dt_before = self.dt;
                self.one_step()?;
                if self.dt != dt_before {
                    break;
                }
            }
        }
        self.cur.t = t_target;
        Ok(())
    }

    pub fn state(&self) -> State2D {
        self.stepper.state_from_fields(&self.cur)
    }
}

// ---------------------------------------------------------------------------
// eps-scaled system residual
// ---------------------------------------------------------------------------

/// Residual norms of the eps-scaled system evaluated on a pullback pair.
#[derive(Debug, Clone, Copy)]
pub struct EpsResidual {
    pub mass_l2: f64,
    pub momentum_l2: f64,
}

/// Discrete residual of the eps-scaled system for fields already expressed
/// in the slow coordinate (the pullback `(xi, v)(t, x, Y)` with `Y = eps y`):
///
/// ```text
/// d/dt xi + div_eps(xi v) = r_mass
/// d/dt (xi v) + div_eps(xi v x v) - mu Lap_eps v
///             - mu' grad_eps div_eps v + grad_eps p(xi) = r_mom
/// ```
///
/// Callers insert either the limit solution (whose residual carries the
/// O(eps) forcing terms) or the pullback of a computed 2D solution (whose
/// residual sits at scheme-error level). Time derivatives are centered
/// between the two states; spatial derivatives are spectral.
pub fn eps_system_residual(
    prev: &State2D,
    next: &State2D,
    eps: EpsScaling,
    params: &FluidParams,
) -> Result<EpsResidual> {
    if prev.grid() != next.grid() {
        return Err(Error::mismatch("pullback states on different grids"));
    }
    let dt = next.time - prev.time;
    if !(dt > 0.0) {
        return Err(Error::mismatch("next must follow prev in time"));
    }
    let e = eps.value();
    let mid = |a: &Field2D, b: &Field2D| a.zip_with(b, |x, y| 0.5 * (x + y));
    let xi = mid(&prev.density, &next.density);
    let v1 = mid(&prev.velocity_x, &next.velocity_x);
    let v2 = mid(&prev.velocity_y, &next.velocity_y);

    let div_eps = |f1: &Field2D, f2: &Field2D| -> Field2D {
        spectral::ddx2d(f1).zip_with(&spectral::ddy2d(f2), |a, b| a + e * b)
    };

    // mass residual
    let m1 = xi.zip_with(&v1, |r, u| r * u);
    let m2 = xi.zip_with(&v2, |r, u| r * u);
    let xi_t = next.density.zip_with(&prev.density, |a, b| (a - b) / dt);
    let r_mass = xi_t.zip_with(&div_eps(&m1, &m2), |a, b| a + b);

    // momentum residual, conservative form per component
    let mom_res = |comp: usize| -> Field2D {
        let (vc, vc_prev, vc_next) = match comp {
            0 => (&v1, &prev.velocity_x, &next.velocity_x),
            _ => (&v2, &prev.velocity_y, &next.velocity_y),
        };
        let m_prev = prev.density.zip_with(vc_prev, |r, u| r * u);
        let m_next = next.density.zip_with(vc_next, |r, u| r * u);
        let m_t = m_next.zip_with(&m_prev, |a, b| (a - b) / dt);
        let flux1 = xi.zip_with(&v1, |r, u| r * u).zip_with(vc, |a, b| a * b);
        let flux2 = xi.zip_with(&v2, |r, u| r * u).zip_with(vc, |a, b| a * b);
        let conv = div_eps(&flux1, &flux2);
        let lap = spectral::ddx2(vc, 2)
            .zip_with(&spectral::ddy2(vc, 2), |a, b| a + e * e * b);
        let divv = div_eps(&v1, &v2);
        let grad_div = match comp {
            0 => spectral::ddx2d(&divv),
            _ => spectral::ddy2d(&divv).map(|v| e * v),
        };
        let pres = xi.map(|r| params.pressure_raw(r));
        let grad_p = match comp {
            0 => spectral::ddx2d(&pres),
            _ => spectral::ddy2d(&pres).map(|v| e * v),
        };
        m_t.zip_with(&conv, |a, b| a + b)
            .zip_with(&lap, |a, b| a - params.shear_viscosity * b)
            .zip_with(&grad_div, |a, b| a - params.bulk_viscosity * b)
            .zip_with(&grad_p, |a, b| a + b)
    };
    let r1 = mom_res(0);
    let r2 = mom_res(1);
    let mom_l2 = (spectral::norm_l2_2d(&r1).powi(2) + spectral::norm_l2_2d(&r2).powi(2)).sqrt();
    Ok(EpsResidual {
        mass_l2: spectral::norm_l2_2d(&r_mass),
        momentum_l2: mom_l2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{GridX, GridY};
    use crate::model::{make_initial_data, DataFamily};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn params() -> FluidParams {
        FluidParams::new(0.5, 2.0, 0.04, 0.66).unwrap()
    }

    fn grid(nx: usize, ny: usize, l: f64) -> Grid2D {
        Grid2D::new(GridX::new(nx).unwrap(), GridY::new(ny, l).unwrap())
    }

    #[test]
    fn equilibrium_fixed_point_2d() {
        let g = grid(32, 32, 4.0);
        let p = params();
        let cfg = SolverConfig2D {
            dt: Some(2e-3),
            ..Default::default()
        };
        let mut s = State2D::equilibrium(g);
        for _ in 0..20 {
            s = step_full(&s, &p, &cfg).unwrap();
        }
        assert!(s.density.map(|v| v - 1.0).max_abs() < 1e-14);
        assert!(s.velocity_x.max_abs() < 1e-14);
        assert!(s.velocity_y.max_abs() < 1e-14);
    }

    #[test]
    fn grad_eps_limits() {
        let g = grid(32, 32, 3.0);
        let f = Field2D::from_fn(g, FieldRole::Derived, |x, y| {
            (2.0 * PI * x).sin() * (PI * y / 3.0).cos()
        });
        // eps -> standard ops at 1
        let eps1 = EpsScaling::new(1.0).unwrap();
        let (fx, fy) = grad_eps(&f, eps1);
        let fx_ref = spectral::ddx2d(&f);
        let fy_ref = spectral::ddy2d(&f);
        assert!(fx.zip_with(&fx_ref, |a, b| a - b).max_abs() < 1e-13);
        assert!(fy.zip_with(&fy_ref, |a, b| a - b).max_abs() < 1e-13);
        // small eps suppresses the y part
        let eps_small = EpsScaling::new(1e-6).unwrap();
        let (_, fy_small) = grad_eps(&f, eps_small);
        assert!(fy_small.max_abs() < 1e-5 * fy_ref.max_abs());
        let lap = laplace_eps(&f, eps_small);
        let fxx = spectral::ddx2(&f, 2);
        assert!(lap.zip_with(&fxx, |a, b| a - b).max_abs() < 1e-9);
    }

    #[test]
    fn conservation_2d() {
        let g = grid(32, 33, 10.0);
        let p = params();
        let gx = GridX::new(32).unwrap();
        let gy = GridY::new(33, 10.0).unwrap();
        let spec = make_initial_data(DataFamily::GaussianBump, 0.25, 1.4, gx, gy).unwrap();
        let eps = EpsScaling::new(1.0).unwrap();
        let s0 = slow_embed(&spec, eps, g).unwrap();
        let (px0, py0) = s0.total_momentum();
        let mass0 = s0.total_mass();
        let cfg = SolverConfig2D {
            dt: Some(1e-3),
            ..Default::default()
        };
        let mut it = Integrator2D::new(&s0, &p, &cfg).unwrap();
        it.advance_to(0.1).unwrap();
        let s = it.state();
        assert!((s.total_mass() - mass0).abs() < 1e-12 * mass0.abs().max(1.0));
        let (px, py) = s.total_momentum();
        assert!((px - px0).abs() < 1e-12);
        assert!((py - py0).abs() < 1e-12);
    }

    #[test]
    fn slow_embed_identity_at_eps_one() {
        let gx = GridX::new(32).unwrap();
        let gy = GridY::new(33, 10.0).unwrap();
        let spec = make_initial_data(DataFamily::GaussianBump, 0.3, 1.4, gx, gy).unwrap();
        let target = grid(32, 33, 10.0);
        let s = slow_embed(&spec, EpsScaling::new(1.0).unwrap(), target).unwrap();
        let err = s
            .density
            .zip_with(spec.density(), |a, b| a - b)
            .max_abs();
        assert!(err < 1e-11, "identity resampling error {err:e}");
    }

    #[test]
    fn slow_embed_slices_repeat_and_normalize() {
        let gx = GridX::new(32).unwrap();
        let gy = GridY::new(33, 10.0).unwrap();
        let spec = make_initial_data(DataFamily::GaussianBump, 0.3, 1.4, gx, gy).unwrap();
        let eps = EpsScaling::new(0.25).unwrap();
        let target = grid(32, 64, 40.0);
        let s = slow_embed(&spec, eps, target).unwrap();
        // per-row unit mass survives the embedding
        for iy in 0..target.y.len() {
            let mass: f64 = s.density.row(iy).iter().sum::<f64>() / 32.0;
            assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-10);
        }
        // rows with equal slow coordinate are identical: eps*y repeats when
        // y wraps the slab period 2 L1 / eps = 80 -> none here, so instead
        // check against direct interpolation at a matching coordinate
        let box_err = SlowEmbedder::new(spec.grid(), grid(32, 64, 30.0), eps);
        assert!(box_err.is_err(), "box smaller than L1/eps must be rejected");
    }

    #[test]
    fn x_independent_reduction_matches_1d_solver() {
        use crate::solver1d::{run_slab, SlabState, State1D};
        // x-independent 2D data on [-L, L): the flow is 1D along y with
        // viscosity nu for u2 and mu for the passive u1
        let l = 2.0;
        let ny = 64;
        let g2 = grid(16, ny, l);
        let p = params();
        let rho0 = |y: f64| 1.0 + 0.2 * (PI * y / l).cos();
        let u2_0 = |y: f64| 0.1 * (PI * y / l).sin();
        let u1_0 = |y: f64| 0.15 * (PI * y / l).cos();
        let s0 = State2D::new(
            Field2D::from_fn(g2, FieldRole::Density, |_, y| rho0(y)),
            Field2D::from_fn(g2, FieldRole::Velocity, |_, y| u1_0(y)),
            Field2D::from_fn(g2, FieldRole::Velocity, |_, y| u2_0(y)),
            0.0,
        )
        .unwrap();

        // the same flow on the unit torus after y = 2 l X - l, tau = t / (2 l):
        // viscosities scale by 1/(2 l)
        let scale = 2.0 * l;
        let p1 = FluidParams::new(
            p.pressure_coeff,
            p.adiabatic_index,
            p.shear_viscosity / scale,
            p.bulk_viscosity / scale,
        )
        .unwrap();
        let g1 = GridX::new(ny).unwrap();
        let map = |xx: f64| -l + scale * xx;
        let oracle0 = State1D::new(
            crate::field::Field1D::from_fn(g1, FieldRole::Density, |x| rho0(map(x))),
            crate::field::Field1D::from_fn(g1, FieldRole::Velocity, |x| u2_0(map(x))),
            crate::field::Field1D::from_fn(g1, FieldRole::Velocity, |x| u1_0(map(x))),
            0.0,
        )
        .unwrap();

        let t_end = 0.5;
        let dt2 = 1e-3;
        let cfg2 = SolverConfig2D {
            dt: Some(dt2),
            ..Default::default()
        };
        let mut it = Integrator2D::new(&s0, &p, &cfg2).unwrap();
        it.advance_to(t_end).unwrap();
        let s2 = it.state();

        let cfg1 = SolverConfig1D {
            dt: Some(dt2 / scale),
            ..Default::default()
        };
        let gy1 = GridY::new(16, 1.0).unwrap();
        let slab = SlabState::new(gy1, vec![oracle0; 16]).unwrap();
        let run = run_slab(&slab, &p1, &cfg1, t_end / scale, t_end / scale, &mut [], false)
            .unwrap();
        let o = run.final_state.slice(0);

        // compare along one x-column of the 2D run
        let mut max_err = 0.0f64;
        for iy in 0..ny {
            max_err = max_err.max((s2.density.at(3, iy) - o.density.as_slice()[iy]).abs());
            max_err = max_err.max((s2.velocity_y.at(3, iy) - o.velocity.as_slice()[iy]).abs());
            max_err = max_err.max((s2.velocity_x.at(3, iy) - o.passive.as_slice()[iy]).abs());
        }
        assert!(
            max_err < 1e-6,
            "2D run does not reduce to the 1D solver: {max_err:e}"
        );
    }

    #[test]
    fn eps_residual_of_limit_solution_is_order_eps() {
        use crate::solver1d::{run_slab, SlabState};
        let gx = GridX::new(64).unwrap();
        let gy = GridY::new(33, 8.0).unwrap();
        let p = params();
        let spec = make_initial_data(DataFamily::GaussianBump, 0.25, 1.1, gx, gy).unwrap();
        let slab0 = SlabState::from_spec(&spec);
        let cfg = SolverConfig1D {
            dt: Some(5e-4),
            ..Default::default()
        };
        let run = run_slab(&slab0, &p, &cfg, 0.5, 0.5, &mut [], true).unwrap();
        let to_state = |slab: &SlabState| -> State2D {
            let g2 = Grid2D::new(gx, gy);
            let pack = |f: fn(&crate::solver1d::State1D) -> &crate::field::Field1D| -> Field2D {
                let mut data = Vec::new();
                for s in slab.slices() {
                    data.extend_from_slice(f(s).as_slice());
                }
                Field2D::derived(g2, data)
            };
            State2D {
                density: pack(|s| &s.density),
                velocity_x: pack(|s| &s.velocity),
                velocity_y: pack(|s| &s.passive),
                time: slab.time,
            }
        };
        let prev = to_state(&run.history[0]);
        let next = to_state(&run.final_state);
        let r_small = eps_system_residual(&prev, &next, EpsScaling::new(0.05).unwrap(), &p)
            .unwrap();
        let r_big = eps_system_residual(&prev, &next, EpsScaling::new(0.2).unwrap(), &p).unwrap();
        // the eps-dependent part of the residual scales ~ eps; with the
        // shared O(dt^2) floor subtracted the ratio should approach 4
        let r0 = eps_system_residual(&prev, &next, EpsScaling::new(1e-9).unwrap(), &p).unwrap();
        let num = (r_big.momentum_l2.powi(2) - r0.momentum_l2.powi(2)).max(0.0).sqrt();
        let den = (r_small.momentum_l2.powi(2) - r0.momentum_l2.powi(2)).max(0.0).sqrt();
        assert!(
            num / den > 2.0 && num / den < 8.0,
            "eps scaling of limit-system residual off: {num:e} / {den:e}"
        );
    }
}

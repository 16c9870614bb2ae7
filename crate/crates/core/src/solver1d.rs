//! Time integration of the parameterized 1D limit system on each y-slice of
//! a slab.
//!
//! Per slice the system is, on the unit torus,
//!
//! ```text
//! d/dt eta + d/dx (eta w)                    = 0
//! eta (d/dt w + w d/dx w)                    = nu d2/dx2 w - d/dx p(eta)
//! eta (d/dt frakw + w d/dx frakw)            = mu d2/dx2 frakw
//! ```
//!
//! The prognostic variables are the conservative ones: `eta`, `m = eta w`,
//! `q = eta frakw`. Every right-hand side is then an exact x-derivative, so
//! its zero Fourier mode vanishes identically and the discrete mass and
//! momenta are carried through the run bitwise unchanged.
//!
//! Time stepping is IMEX: the stiff viscous term is majorized by a
//! constant-coefficient Laplacian `c_visc * mu_or_nu * d2/dx2` treated
//! implicitly per mode (`c_visc >= 1/eta` pointwise keeps the explicit
//! remainder dominated); everything else is explicit. Runs use BDF2 with an
//! implicit-midpoint startup step; the public one-shot step ops use the
//! midpoint scheme, which is second order on its own.

use crate::error::{Error, Result};
use crate::field::{Field1D, FieldRole};
use crate::grid::{GridX, GridY};
use crate::model::{FluidParams, InitialDataSpec};
use crate::series::DiagnosticSeries;
use crate::spectral::{self, Transform};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Safety factor on `max(1/eta)` for the implicit viscous coefficient.
const IMPLICIT_MARGIN: f64 = 1.5;

/// One y-slice of the limit system at a single time.
#[derive(Debug, Clone)]
pub struct State1D {
    pub density: Field1D,
    pub velocity: Field1D,
    pub passive: Field1D,
    pub time: f64,
}

impl State1D {
    pub fn new(
        density: Field1D,
        velocity: Field1D,
        passive: Field1D,
        time: f64,
    ) -> Result<Self> {
        if density.grid() != velocity.grid() || density.grid() != passive.grid() {
            return Err(Error::mismatch("state fields on different grids"));
        }
        if density.min() <= 0.0 {
            return Err(Error::domain("state density must be strictly positive"));
        }
        Ok(State1D {
            density,
            velocity,
            passive,
            time,
        })
    }

    pub fn equilibrium(grid: GridX) -> Self {
        State1D {
            density: Field1D::constant(grid, 1.0).with_role(FieldRole::Density),
            velocity: Field1D::zeros(grid).with_role(FieldRole::Velocity),
            passive: Field1D::zeros(grid).with_role(FieldRole::Velocity),
            time: 0.0,
        }
    }

    pub fn grid(&self) -> GridX {
        self.density.grid()
    }

    /// `int eta dx`.
    pub fn mass(&self) -> f64 {
        spectral::integrate_x(&self.density)
    }

    /// `int eta w dx`.
    pub fn momentum(&self) -> f64 {
        spectral::integrate_x(&self.density.zip_with(&self.velocity, |r, w| r * w))
    }

    /// `int eta frakw dx`.
    pub fn passive_momentum(&self) -> f64 {
        spectral::integrate_x(&self.density.zip_with(&self.passive, |r, w| r * w))
    }

    /// `E_0 = int ( eta w^2 / 2 + P(eta) ) dx`.
    pub fn energy(&self, params: &FluidParams) -> f64 {
        let dx = self.grid().dx();
        self.density
            .as_slice()
            .iter()
            .zip(self.velocity.as_slice())
            .map(|(&r, &w)| 0.5 * r * w * w + params.potential_raw(r))
            .sum::<f64>()
            * dx
    }

    /// `int eta frakw^2 dx`, the weighted passive energy.
    pub fn passive_energy(&self) -> f64 {
        spectral::integrate_x(&self.density.zip_with(&self.passive, |r, w| r * w * w))
    }

    /// `int nu |w_x|^2 dx` evaluated spectrally.
    pub fn velocity_dissipation(&self) -> f64 {
        let wx = spectral::ddx(&self.velocity);
        spectral::integrate_x(&wx.zip_with(&wx, |a, b| a * b))
    }
}

/// Family of slices sharing a common time and x-grid, indexed by the y-grid.
#[derive(Debug, Clone)]
pub struct SlabState {
    grid_y: GridY,
    slices: Vec<State1D>,
    pub time: f64,
}

impl SlabState {
    pub fn new(grid_y: GridY, slices: Vec<State1D>) -> Result<Self> {
        if slices.len() != grid_y.len() {
            return Err(Error::mismatch(format!(
                "{} slices for a {}-node y grid",
                slices.len(),
                grid_y.len()
            )));
        }
        let t = slices[0].time;
        let gx = slices[0].grid();
        for s in &slices {
            if s.grid() != gx || (s.time - t).abs() > 1e-12 {
                return Err(Error::mismatch("slices must share grid and time"));
            }
        }
        Ok(SlabState {
            grid_y,
            slices,
            time: t,
        })
    }

    /// Build the t = 0 slab from admissible initial data.
    pub fn from_spec(spec: &InitialDataSpec) -> Self {
        let grid = spec.grid();
        let slices = (0..grid.y.len())
            .map(|iy| State1D {
                density: Field1D::derived(grid.x, spec.density().row(iy).to_vec())
                    .with_role(FieldRole::Density),
                velocity: Field1D::derived(grid.x, spec.horizontal().row(iy).to_vec()),
                passive: Field1D::derived(grid.x, spec.vertical().row(iy).to_vec()),
                time: 0.0,
            })
            .collect();
        SlabState {
            grid_y: grid.y,
            slices,
            time: 0.0,
        }
    }

    pub fn grid_y(&self) -> GridY {
        self.grid_y
    }

    pub fn grid_x(&self) -> GridX {
        self.slices[0].grid()
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    pub fn slices(&self) -> &[State1D] {
        &self.slices
    }

    pub fn slice(&self, iy: usize) -> &State1D {
        &self.slices[iy]
    }

    /// Largest density over all slices.
    pub fn density_max(&self) -> f64 {
        self.slices
            .iter()
            .map(|s| s.density.max())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Smallest density over all slices.
    pub fn density_min(&self) -> f64 {
        self.slices
            .iter()
            .map(|s| s.density.min())
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    ImexBdf2,
    Rk4Explicit,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverConfig1D {
    /// Fixed time step; `None` derives one from the CFL bound.
    pub dt: Option<f64>,
    pub scheme: Scheme,
    /// Fraction of the acoustic CFL bound to use (in `(0, 1)`).
    pub cfl_safety: f64,
    /// Apply the 2/3 rule to nonlinear product spectra.
    pub dealias: bool,
    /// Reject steps that take the density at or below this floor.
    pub positivity_floor: f64,
    /// Maximum dt halvings after rejected steps.
    pub max_halvings: u32,
}

impl Default for SolverConfig1D {
    fn default() -> Self {
        SolverConfig1D {
            dt: None,
            scheme: Scheme::ImexBdf2,
            cfl_safety: 0.4,
            dealias: true,
            positivity_floor: 1e-8,
            max_halvings: 10,
        }
    }
}

impl SolverConfig1D {
    pub fn validate(&self) -> Result<()> {
        if let Some(dt) = self.dt {
            if !(dt > 0.0) {
                return Err(Error::config(format!("dt = {dt} must be > 0")));
            }
        }
        if !(self.cfl_safety > 0.0 && self.cfl_safety < 1.0) {
            return Err(Error::config(format!(
                "cfl_safety = {} must lie in (0, 1)",
                self.cfl_safety
            )));
        }
        if !(self.positivity_floor > 0.0) {
            return Err(Error::config("positivity_floor must be > 0"));
        }
        Ok(())
    }
}

/// Acoustic CFL bound `cfl_safety * dx / (max|w| + max sound speed)`.
pub fn cfl_dt(state: &State1D, params: &FluidParams, cfg: &SolverConfig1D) -> f64 {
    let c_max = params
        .sound_speed(state.density.max())
        .unwrap_or(f64::INFINITY);
    let u_max = state.velocity.max_abs();
    cfg.cfl_safety * state.grid().dx() / (u_max + c_max).max(1e-12)
}

/// Optional manufactured source `(t, x) -> (S_eta, S_m, S_q)` added to the
/// conservative right-hand sides.
pub type Source1D = Arc<dyn Fn(f64, f64) -> (f64, f64, f64) + Send + Sync>;

// ---------------------------------------------------------------------------
// Internal spectral stepper
// ---------------------------------------------------------------------------

/// Prognostic fields in both representations.
#[derive(Clone)]
struct Prog {
    eta: Vec<f64>,
    m: Vec<f64>,
    q: Vec<f64>,
    eta_hat: Vec<Complex64>,
    m_hat: Vec<Complex64>,
    q_hat: Vec<Complex64>,
    t: f64,
}

#[derive(Clone)]
struct RhsHat {
    eta: Vec<Complex64>,
    m: Vec<Complex64>,
    q: Vec<Complex64>,
}

pub(crate) struct Stepper1D {
    params: FluidParams,
    cfg: SolverConfig1D,
    grid: GridX,
    tr: Transform,
    /// squared wavenumbers, Nyquist included (used only in implicit decay)
    k2: Vec<f64>,
    /// `IMPLICIT_MARGIN * max(1/eta)`, frozen between history restarts
    c_visc: f64,
    source: Option<Source1D>,
    slice_tag: usize,
}

impl Stepper1D {
    pub(crate) fn new(params: FluidParams, cfg: SolverConfig1D, grid: GridX) -> Self {
        let n = grid.len();
        let base = 2.0 * std::f64::consts::PI / grid.length();
        let k2 = (0..n)
            .map(|j| (base * spectral::mode_index(j, n) as f64).powi(2))
            .collect();
        Stepper1D {
            params,
            cfg,
            grid,
            tr: Transform::get(n),
            k2,
            c_visc: 0.0,
            source: None,
            slice_tag: usize::MAX,
        }
    }

    fn tagged(mut self, slice: usize) -> Self {
        self.slice_tag = slice;
        self
    }

    fn prog_from_state(&self, s: &State1D) -> Prog {
        let eta = s.density.as_slice().to_vec();
        let m: Vec<f64> = eta
            .iter()
            .zip(s.velocity.as_slice())
            .map(|(&r, &w)| r * w)
            .collect();
        let q: Vec<f64> = eta
            .iter()
            .zip(s.passive.as_slice())
            .map(|(&r, &w)| r * w)
            .collect();
        Prog {
            eta_hat: self.tr.coeffs(&eta),
            m_hat: self.tr.coeffs(&m),
            q_hat: self.tr.coeffs(&q),
            eta,
            m,
            q,
            t: s.time,
        }
    }

    fn state_from_prog(&self, p: &Prog) -> State1D {
        let w: Vec<f64> = p.m.iter().zip(&p.eta).map(|(&m, &r)| m / r).collect();
        let frakw: Vec<f64> = p.q.iter().zip(&p.eta).map(|(&q, &r)| q / r).collect();
        State1D {
            density: Field1D::derived(self.grid, p.eta.clone()).with_role(FieldRole::Density),
            velocity: Field1D::derived(self.grid, w),
            passive: Field1D::derived(self.grid, frakw),
            time: p.t,
        }
    }

    fn refresh_c_visc(&mut self, eta: &[f64]) {
        let inv_max = eta.iter().fold(0.0f64, |m, &r| m.max(1.0 / r));
        self.c_visc = IMPLICIT_MARGIN * inv_max;
    }

    /// Conservative right-hand sides in spectral space. Every term carries a
    /// derivative factor, so the zero mode comes out exactly zero (sources
    /// excepted).
    fn rhs_hat(&self, p: &Prog) -> RhsHat {
        let n = self.grid.len();
        let base = 2.0 * std::f64::consts::PI / self.grid.length();
        let a = self.params;
        let nu = a.nu();
        let mu = a.shear_viscosity;

        let mut w = vec![0.0; n];
        let mut frakw = vec![0.0; n];
        let mut mw = vec![0.0; n];
        let mut qw = vec![0.0; n];
        let mut pres = vec![0.0; n];
        for j in 0..n {
            let r = p.eta[j];
            let wj = p.m[j] / r;
            w[j] = wj;
            frakw[j] = p.q[j] / r;
            mw[j] = p.m[j] * wj;
            qw[j] = p.q[j] * wj;
            pres[j] = a.pressure_raw(r);
        }
        // center the pressure so an equilibrium state yields an exactly zero
        // spectrum (the gradient is unchanged)
        let p_mean = pres.iter().sum::<f64>() / n as f64;
        for v in &mut pres {
            *v -= p_mean;
        }

        let mut mw_hat = self.tr.coeffs(&mw);
        let mut p_hat = self.tr.coeffs(&pres);
        let mut qw_hat = self.tr.coeffs(&qw);
        let w_hat = self.tr.coeffs(&w);
        let frakw_hat = self.tr.coeffs(&frakw);
        if self.cfg.dealias {
            spectral::dealias_coeffs(&mut mw_hat);
            spectral::dealias_coeffs(&mut p_hat);
            spectral::dealias_coeffs(&mut qw_hat);
        }

        let nu_c = self.c_visc * nu;
        let mu_c = self.c_visc * mu;
        let mut f_eta = vec![Complex64::new(0.0, 0.0); n];
        let mut f_m = vec![Complex64::new(0.0, 0.0); n];
        let mut f_q = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            if spectral::is_nyquist(j, n) {
                continue;
            }
            let k = base * spectral::mode_index(j, n) as f64;
            let ik = Complex64::new(0.0, k);
            let k2 = k * k;
            f_eta[j] = -ik * p.m_hat[j];
            f_m[j] = -ik * (mw_hat[j] + p_hat[j]) - nu * k2 * w_hat[j] + nu_c * k2 * p.m_hat[j];
            f_q[j] = -ik * qw_hat[j] - mu * k2 * frakw_hat[j] + mu_c * k2 * p.q_hat[j];
        }

        if let Some(src) = &self.source {
            let mut s_eta = vec![0.0; n];
            let mut s_m = vec![0.0; n];
            let mut s_q = vec![0.0; n];
            for j in 0..n {
                let (se, sm, sq) = src(p.t, self.grid.node(j));
                s_eta[j] = se;
                s_m[j] = sm;
                s_q[j] = sq;
            }
            for (f, s) in [
                (&mut f_eta, &s_eta),
                (&mut f_m, &s_m),
                (&mut f_q, &s_q),
            ] {
                for (fj, cj) in f.iter_mut().zip(self.tr.coeffs(s)) {
                    *fj += cj;
                }
            }
        }

        RhsHat {
            eta: f_eta,
            m: f_m,
            q: f_q,
        }
    }

    fn check_candidate(&self, eta: &[f64], m: &[f64], q: &[f64], t: f64) -> Result<()> {
        for v in eta.iter().chain(m).chain(q) {
            if !v.is_finite() {
                return Err(Error::Blowup {
                    time: t,
                    slice: self.slice_tag,
                });
            }
        }
        if eta.iter().any(|&r| r <= self.cfg.positivity_floor) {
            return Err(Error::PositivityLoss {
                time: t,
                slice: self.slice_tag,
            });
        }
        Ok(())
    }

    fn finish(&self, eta_hat: Vec<Complex64>, m_hat: Vec<Complex64>, q_hat: Vec<Complex64>, t: f64) -> Result<Prog> {
        let eta = self.tr.samples(&eta_hat);
        let m = self.tr.samples(&m_hat);
        let q = self.tr.samples(&q_hat);
        self.check_candidate(&eta, &m, &q, t)?;
        Ok(Prog {
            eta,
            m,
            q,
            eta_hat,
            m_hat,
            q_hat,
            t,
        })
    }

    /// Self-starting second-order IMEX step: midpoint rule on the explicit
    /// remainder, Crank-Nicolson on the implicit majorant (the trapezoidal
    /// treatment keeps the anti-diffusive part of the remainder contractive;
    /// an explicit corrector would not).
    fn step_midpoint(&self, cur: &Prog, dt: f64) -> Result<(Prog, RhsHat)> {
        let n = self.grid.len();
        let nu_c = self.c_visc * self.params.nu();
        let mu_c = self.c_visc * self.params.shear_viscosity;
        let f0 = self.rhs_hat(cur);
        let half = 0.5 * dt;

        let mut eta_mid = vec![Complex64::new(0.0, 0.0); n];
        let mut m_mid = vec![Complex64::new(0.0, 0.0); n];
        let mut q_mid = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            let k2 = self.k2[j];
            eta_mid[j] = cur.eta_hat[j] + half * f0.eta[j];
            m_mid[j] = (cur.m_hat[j] + half * f0.m[j]) / (1.0 + half * nu_c * k2);
            q_mid[j] = (cur.q_hat[j] + half * f0.q[j]) / (1.0 + half * mu_c * k2);
        }
        let mid = self.finish(eta_mid, m_mid, q_mid, cur.t + half)?;
        let fm = self.rhs_hat(&mid);

        let mut eta_new = vec![Complex64::new(0.0, 0.0); n];
        let mut m_new = vec![Complex64::new(0.0, 0.0); n];
        let mut q_new = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            let k2 = self.k2[j];
            eta_new[j] = cur.eta_hat[j] + dt * fm.eta[j];
            let cm = half * nu_c * k2;
            let cq = half * mu_c * k2;
            m_new[j] = ((1.0 - cm) * cur.m_hat[j] + dt * fm.m[j]) / (1.0 + cm);
            q_new[j] = ((1.0 - cq) * cur.q_hat[j] + dt * fm.q[j]) / (1.0 + cq);
        }
        if self.source.is_none() {
            // the conservative zero modes are exact constants of motion
            eta_new[0] = cur.eta_hat[0];
            m_new[0] = cur.m_hat[0];
            q_new[0] = cur.q_hat[0];
        }
        let new = self.finish(eta_new, m_new, q_new, cur.t + dt)?;
        Ok((new, f0))
    }

    /// SBDF2 step given the previous level and its right-hand side.
    fn step_bdf2(
        &self,
        prev: &Prog,
        prev_rhs: &RhsHat,
        cur: &Prog,
        dt: f64,
    ) -> Result<(Prog, RhsHat)> {
        let n = self.grid.len();
        let nu_c = self.c_visc * self.params.nu();
        let mu_c = self.c_visc * self.params.shear_viscosity;
        let cur_rhs = self.rhs_hat(cur);
        let two_dt = 2.0 * dt;

        let mut eta_new = vec![Complex64::new(0.0, 0.0); n];
        let mut m_new = vec![Complex64::new(0.0, 0.0); n];
        let mut q_new = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            let k2 = self.k2[j];
            let ex_eta = 2.0 * cur_rhs.eta[j] - prev_rhs.eta[j];
            let ex_m = 2.0 * cur_rhs.m[j] - prev_rhs.m[j];
            let ex_q = 2.0 * cur_rhs.q[j] - prev_rhs.q[j];
            eta_new[j] =
                (4.0 * cur.eta_hat[j] - prev.eta_hat[j] + two_dt * ex_eta) / 3.0;
            m_new[j] = (4.0 * cur.m_hat[j] - prev.m_hat[j] + two_dt * ex_m)
                / (3.0 + two_dt * nu_c * k2);
            q_new[j] = (4.0 * cur.q_hat[j] - prev.q_hat[j] + two_dt * ex_q)
                / (3.0 + two_dt * mu_c * k2);
        }
        if self.source.is_none() {
            eta_new[0] = cur.eta_hat[0];
            m_new[0] = cur.m_hat[0];
            q_new[0] = cur.q_hat[0];
        }
        let new = self.finish(eta_new, m_new, q_new, cur.t + dt)?;
        Ok((new, cur_rhs))
    }

    /// Classic RK4 with fully explicit diffusion (reference scheme for
    /// verification at small steps).
    fn step_rk4(&self, cur: &Prog, dt: f64) -> Result<(Prog, RhsHat)> {
        let n = self.grid.len();
        // with c_visc = 0 the remainder term cancels and diffusion is explicit
        let full = self.clone_with_c(0.0);
        let k1 = full.rhs_hat(cur);
        let comb = |a: &[Complex64], b: &[Complex64], s: f64| -> Vec<Complex64> {
            a.iter().zip(b).map(|(&x, &y)| x + s * y).collect()
        };
        let k2 = {
            let e = comb(&cur.eta_hat, &k1.eta, 0.5 * dt);
            let m = comb(&cur.m_hat, &k1.m, 0.5 * dt);
            let q = comb(&cur.q_hat, &k1.q, 0.5 * dt);
            full_eval(&full, &e, &m, &q, cur.t + 0.5 * dt)?
        };
        let k3 = {
            let e = comb(&cur.eta_hat, &k2.eta, 0.5 * dt);
            let m = comb(&cur.m_hat, &k2.m, 0.5 * dt);
            let q = comb(&cur.q_hat, &k2.q, 0.5 * dt);
            full_eval(&full, &e, &m, &q, cur.t + 0.5 * dt)?
        };
        let k4 = {
            let e = comb(&cur.eta_hat, &k3.eta, dt);
            let m = comb(&cur.m_hat, &k3.m, dt);
            let q = comb(&cur.q_hat, &k3.q, dt);
            full_eval(&full, &e, &m, &q, cur.t + dt)?
        };
        let sixth = dt / 6.0;
        let mut eta_new = vec![Complex64::new(0.0, 0.0); n];
        let mut m_new = vec![Complex64::new(0.0, 0.0); n];
        let mut q_new = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            eta_new[j] = cur.eta_hat[j]
                + sixth * (k1.eta[j] + 2.0 * k2.eta[j] + 2.0 * k3.eta[j] + k4.eta[j]);
            m_new[j] =
                cur.m_hat[j] + sixth * (k1.m[j] + 2.0 * k2.m[j] + 2.0 * k3.m[j] + k4.m[j]);
            q_new[j] =
                cur.q_hat[j] + sixth * (k1.q[j] + 2.0 * k2.q[j] + 2.0 * k3.q[j] + k4.q[j]);
        }
        if self.source.is_none() {
            eta_new[0] = cur.eta_hat[0];
            m_new[0] = cur.m_hat[0];
            q_new[0] = cur.q_hat[0];
        }
        let new = self.finish(eta_new, m_new, q_new, cur.t + dt)?;
        Ok((new, k1))
    }

    fn clone_with_c(&self, c: f64) -> Stepper1D {
        Stepper1D {
            params: self.params,
            cfg: self.cfg,
            grid: self.grid,
            tr: self.tr.clone(),
            k2: self.k2.clone(),
            c_visc: c,
            source: self.source.clone(),
            slice_tag: self.slice_tag,
        }
    }
}

fn full_eval(
    st: &Stepper1D,
    eta_hat: &[Complex64],
    m_hat: &[Complex64],
    q_hat: &[Complex64],
    t: f64,
) -> Result<RhsHat> {
    let eta = st.tr.samples(eta_hat);
    let m = st.tr.samples(m_hat);
    let q = st.tr.samples(q_hat);
    st.check_candidate(&eta, &m, &q, t)?;
    let p = Prog {
        eta,
        m,
        q,
        eta_hat: eta_hat.to_vec(),
        m_hat: m_hat.to_vec(),
        q_hat: q_hat.to_vec(),
        t,
    };
    Ok(st.rhs_hat(&p))
}

// ---------------------------------------------------------------------------
// Public step operations
// ---------------------------------------------------------------------------

/// Advance `(eta, w)` by one step (the passive field is carried unchanged).
///
/// Single-shot entry point using the self-starting second-order IMEX
/// midpoint scheme; long runs should go through [`run_slab`], which uses
/// BDF2 with history.
pub fn step_limit(state: &State1D, params: &FluidParams, cfg: &SolverConfig1D) -> Result<State1D> {
    cfg.validate()?;
    let dt = cfg.dt.unwrap_or_else(|| cfl_dt(state, params, cfg));
    let mut stepper = Stepper1D::new(*params, *cfg, state.grid());
    stepper.refresh_c_visc(state.density.as_slice());
    let prog = stepper.prog_from_state(state);
    let (new, _) = match cfg.scheme {
        Scheme::ImexBdf2 => stepper.step_midpoint(&prog, dt)?,
        Scheme::Rk4Explicit => stepper.step_rk4(&prog, dt)?,
    };
    let mut out = stepper.state_from_prog(&new);
    // the passive field belongs to step_passive
    out.passive = state.passive.clone();
    Ok(out)
}

/// Advance the passive field by one step against the already-advanced
/// `(eta, w)` carried by `state` (Lie splitting); time is left unchanged.
pub fn step_passive(state: &State1D, params: &FluidParams, cfg: &SolverConfig1D) -> Result<State1D> {
    cfg.validate()?;
    let dt = cfg.dt.unwrap_or_else(|| cfl_dt(state, params, cfg));
    let grid = state.grid();
    let n = grid.len();
    let tr = Transform::get(n);
    let mu = params.shear_viscosity;
    let inv_max = state
        .density
        .as_slice()
        .iter()
        .fold(0.0f64, |mx, &r| mx.max(1.0 / r));
    let mu_c = IMPLICIT_MARGIN * inv_max * mu;
    let base = 2.0 * std::f64::consts::PI / grid.length();
    let k2: Vec<f64> = (0..n)
        .map(|j| (base * spectral::mode_index(j, n) as f64).powi(2))
        .collect();

    let eta = state.density.as_slice();
    let w = state.velocity.as_slice();
    let rhs = |q: &[f64], q_hat: &[Complex64]| -> Vec<Complex64> {
        let mut qw = vec![0.0; n];
        let mut frakw = vec![0.0; n];
        for j in 0..n {
            qw[j] = q[j] * w[j];
            frakw[j] = q[j] / eta[j];
        }
        let mut qw_hat = tr.coeffs(&qw);
        let frakw_hat = tr.coeffs(&frakw);
        if cfg.dealias {
            spectral::dealias_coeffs(&mut qw_hat);
        }
        let mut f = vec![Complex64::new(0.0, 0.0); n];
        for j in 0..n {
            if spectral::is_nyquist(j, n) {
                continue;
            }
            let k = base * spectral::mode_index(j, n) as f64;
            f[j] = -Complex64::new(0.0, k) * qw_hat[j] - mu * k2[j] * frakw_hat[j]
                + mu_c * k2[j] * q_hat[j];
        }
        f
    };

    let q0: Vec<f64> = eta
        .iter()
        .zip(state.passive.as_slice())
        .map(|(&r, &v)| r * v)
        .collect();
    let q0_hat = tr.coeffs(&q0);
    let f0 = rhs(&q0, &q0_hat);
    let half = 0.5 * dt;
    let mut q_mid_hat = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        q_mid_hat[j] = (q0_hat[j] + half * f0[j]) / (1.0 + half * mu_c * k2[j]);
    }
    let q_mid = tr.samples(&q_mid_hat);
    let fm = rhs(&q_mid, &q_mid_hat);
    let mut q_new_hat = vec![Complex64::new(0.0, 0.0); n];
    for j in 0..n {
        let c = half * mu_c * k2[j];
        q_new_hat[j] = ((1.0 - c) * q0_hat[j] + dt * fm[j]) / (1.0 + c);
    }
    // the weighted passive mean is a constant of motion
    q_new_hat[0] = q0_hat[0];
    let q_new = tr.samples(&q_new_hat);
    if !q_new.iter().all(|v| v.is_finite()) {
        return Err(Error::Blowup {
            time: state.time,
            slice: usize::MAX,
        });
    }
    let frakw: Vec<f64> = q_new.iter().zip(eta).map(|(&q, &r)| q / r).collect();
    Ok(State1D {
        density: state.density.clone(),
        velocity: state.velocity.clone(),
        passive: Field1D::derived(grid, frakw),
        time: state.time,
    })
}

/// Discrete residual of the limit system between two consecutive states,
/// using a centered time difference and spectral space derivatives. Returns
/// `(mass residual, momentum residual)` at the midpoint time.
pub fn residual_limit(
    state: &State1D,
    state_prev: &State1D,
    params: &FluidParams,
) -> Result<(Field1D, Field1D)> {
    if state.grid() != state_prev.grid() {
        return Err(Error::mismatch("states on different grids"));
    }
    let dt = state.time - state_prev.time;
    if !(dt > 0.0) {
        return Err(Error::mismatch("state must follow state_prev in time"));
    }
    let mid = |a: &Field1D, b: &Field1D| a.zip_with(b, |x, y| 0.5 * (x + y));
    let eta = mid(&state.density, &state_prev.density);
    let w = mid(&state.velocity, &state_prev.velocity);
    let m_new = state.density.zip_with(&state.velocity, |r, v| r * v);
    let m_old = state_prev
        .density
        .zip_with(&state_prev.velocity, |r, v| r * v);

    let eta_t = state
        .density
        .zip_with(&state_prev.density, |a, b| (a - b) / dt);
    let m_t = m_new.zip_with(&m_old, |a, b| (a - b) / dt);

    let flux_mass = eta.zip_with(&w, |r, v| r * v);
    let r_mass = eta_t.zip_with(&spectral::ddx(&flux_mass), |a, b| a + b);

    let flux_mom = eta.zip_with(&w, |r, v| r * v * v);
    let pres = eta.map(|r| params.pressure_raw(r));
    let w_xx = spectral::ddx_order(&w, 2);
    let r_mom_core = m_t
        .zip_with(&spectral::ddx(&flux_mom), |a, b| a + b)
        .zip_with(&spectral::ddx(&pres), |a, b| a + b);
    let r_mom = r_mom_core.zip_with(&w_xx, |a, b| a - params.nu() * b);
    Ok((r_mass, r_mom))
}

// ---------------------------------------------------------------------------
// Slab runs
// ---------------------------------------------------------------------------

/// Named scalar diagnostic sampled on the run schedule.
pub trait SlabProbe: Send {
    fn name(&self) -> &str;
    fn sample(&mut self, slab: &SlabState) -> f64;
}

/// Probe from a name and a closure.
pub fn probe<F>(name: &str, f: F) -> Box<dyn SlabProbe>
where
    F: FnMut(&SlabState) -> f64 + Send + 'static,
{
    struct P<F> {
        name: String,
        f: F,
    }
    impl<F: FnMut(&SlabState) -> f64 + Send> SlabProbe for P<F> {
        fn name(&self) -> &str {
            &self.name
        }
        fn sample(&mut self, slab: &SlabState) -> f64 {
            (self.f)(slab)
        }
    }
    Box::new(P {
        name: name.to_string(),
        f,
    })
}

/// Output of [`run_slab`]: the final slab, the probe series, and (when
/// requested) the sampled state history including t = 0.
#[derive(Debug)]
pub struct SlabRun {
    pub final_state: SlabState,
    pub series: DiagnosticSeries,
    pub history: Vec<SlabState>,
}

/// Incremental driver for one slice (BDF2 with midpoint startup, step
/// rejection with dt halving, exact landing on sample times). [`run_slab`]
/// drives one of these per slice; manufactured-solution tests use it
/// directly through [`Integrator1D::with_source`].
pub struct Integrator1D {
    stepper: Stepper1D,
    cur: Prog,
    prev: Option<(Prog, RhsHat)>,
    dt: f64,
    halvings: u32,
}

impl Integrator1D {
    pub fn new(state: &State1D, params: &FluidParams, cfg: &SolverConfig1D) -> Result<Self> {
        cfg.validate()?;
        let dt = cfg.dt.unwrap_or_else(|| cfl_dt(state, params, cfg));
        Ok(Self::with_stepper(
            Stepper1D::new(*params, *cfg, state.grid()),
            state,
            dt,
        ))
    }

    pub fn with_source(mut self, source: Source1D) -> Self {
        self.stepper.source = Some(source);
        self
    }

    pub fn time(&self) -> f64 {
        self.cur.t
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn with_stepper(stepper: Stepper1D, state: &State1D, dt: f64) -> Self {
        let mut stepper = stepper;
        stepper.refresh_c_visc(state.density.as_slice());
        let cur = stepper.prog_from_state(state);
        Integrator1D {
            stepper,
            cur,
            prev: None,
            dt,
            halvings: 0,
        }
    }

    fn restart(&mut self) {
        self.prev = None;
        self.stepper.refresh_c_visc(&self.cur.eta);
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

    /// Advance to precisely `t_target`. dt changes (uneven remainders or
    /// positivity halvings) restart the multistep history; afterwards the
    /// clock is snapped onto the target to keep accumulated rounding out of
    /// the sample schedule.
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
                    // a rejection halved dt; recompute the remaining schedule
                    break;
                }
            }
        }
        self.cur.t = t_target;
        Ok(())
    }

    pub fn state(&self) -> State1D {
        self.stepper.state_from_prog(&self.cur)
    }
}

/// Drive all slices of a slab to `t_end`, sampling probes every `sample_dt`.
/// Slices evolve independently (the slow coordinate is a pure parameter) and
/// are advanced by a deterministic parallel map.
pub fn run_slab(
    initial: &SlabState,
    params: &FluidParams,
    cfg: &SolverConfig1D,
    t_end: f64,
    sample_dt: f64,
    probes: &mut [Box<dyn SlabProbe>],
    keep_history: bool,
) -> Result<SlabRun> {
    cfg.validate()?;
    if !(t_end > initial.time) {
        return Err(Error::config(format!(
            "t_end = {t_end} must exceed the initial time {}",
            initial.time
        )));
    }
    if !(sample_dt > 0.0) {
        return Err(Error::config("sample_dt must be > 0"));
    }

    // one dt for the whole slab: the most restrictive slice CFL
    let dt = cfg.dt.unwrap_or_else(|| {
        initial
            .slices()
            .iter()
            .map(|s| cfl_dt(s, params, cfg))
            .fold(f64::INFINITY, f64::min)
    });
    let steps_per_sample = (sample_dt / dt - 1e-9).ceil().max(1.0);
    let dt = sample_dt / steps_per_sample;

    let mut integrators: Vec<Integrator1D> = initial
        .slices()
        .iter()
        .enumerate()
        .map(|(iy, s)| {
            Integrator1D::with_stepper(Stepper1D::new(*params, *cfg, s.grid()).tagged(iy), s, dt)
        })
        .collect();

    let n_samples = ((t_end - initial.time) / sample_dt + 0.5).floor() as usize;
    let names: Vec<String> = probes.iter().map(|p| p.name().to_string()).collect();
    let name_refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
    let mut series = DiagnosticSeries::new(&name_refs);
    let mut history = Vec::new();

    let record = |slab: &SlabState,
                      probes: &mut [Box<dyn SlabProbe>],
                      series: &mut DiagnosticSeries,
                      history: &mut Vec<SlabState>| {
        let values: Vec<f64> = probes.iter_mut().map(|p| p.sample(slab)).collect();
        series.push(slab.time, &values);
        if keep_history {
            history.push(slab.clone());
        }
    };

    record(initial, probes, &mut series, &mut history);

    let mut current = initial.clone();
    for s in 1..=n_samples {
        let t_target = initial.time + s as f64 * sample_dt;
        let results: Vec<Result<()>> = integrators
            .par_iter_mut()
            .map(|it| it.advance_to(t_target))
            .collect();
        for r in results {
            r?;
        }
        let slices: Vec<State1D> = integrators.iter().map(|it| it.state()).collect();
        current = SlabState::new(initial.grid_y(), slices)?;
        record(&current, probes, &mut series, &mut history);
    }

    Ok(SlabRun {
        final_state: current,
        series,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_initial_data, DataFamily};
    use std::f64::consts::PI;

    fn params() -> FluidParams {
        FluidParams::new(0.5, 2.0, 0.04, 0.66).unwrap()
    }

    fn grid() -> GridX {
        GridX::new(64).unwrap()
    }

    fn perturbed(grid: GridX, amp: f64) -> State1D {
        State1D {
            density: Field1D::from_fn(grid, FieldRole::Density, |x| {
                1.0 + amp * (2.0 * PI * x).cos()
            }),
            velocity: Field1D::from_fn(grid, FieldRole::Velocity, |x| amp * (2.0 * PI * x).sin()),
            passive: Field1D::from_fn(grid, FieldRole::Velocity, |x| amp * (4.0 * PI * x).cos()),
            time: 0.0,
        }
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let g = grid();
        let p = params();
        let cfg = SolverConfig1D {
            dt: Some(1e-3),
            ..Default::default()
        };
        let mut s = State1D::equilibrium(g);
        for _ in 0..50 {
            s = step_limit(&s, &p, &cfg).unwrap();
            s = step_passive(&s, &p, &cfg).unwrap();
        }
        assert!(s.density.map(|v| v - 1.0).max_abs() < 1e-14);
        assert!(s.velocity.max_abs() < 1e-14);
        assert!(s.passive.max_abs() < 1e-14);
    }

    #[test]
    fn one_step_matches_fine_reference_at_local_order() {
        // local error of a single midpoint step should shrink ~ dt^3
        let g = grid();
        let p = params();
        let s0 = perturbed(g, 0.05);
        let err_for = |dt: f64| -> f64 {
            let coarse = step_limit(
                &s0,
                &p,
                &SolverConfig1D {
                    dt: Some(dt),
                    ..Default::default()
                },
            )
            .unwrap();
            // reference: 16 micro-steps of dt/16
            let fine_cfg = SolverConfig1D {
                dt: Some(dt / 16.0),
                ..Default::default()
            };
            let mut fine = s0.clone();
            for _ in 0..16 {
                fine = step_limit(&fine, &p, &fine_cfg).unwrap();
            }
            coarse
                .velocity
                .zip_with(&fine.velocity, |a, b| a - b)
                .max_abs()
        };
        let e1 = err_for(2e-3);
        let e2 = err_for(1e-3);
        let ratio = e1 / e2;
        assert!(
            ratio > 5.5,
            "local order too low: errors {e1:.3e}, {e2:.3e}, ratio {ratio:.2}"
        );
    }

    #[test]
    fn passive_heat_decay() {
        // eta = 1, w = 0 frozen: the passive equation is the heat equation
        let g = grid();
        let p = params();
        let mut s = State1D::equilibrium(g);
        s.passive = Field1D::from_fn(g, FieldRole::Velocity, |x| (2.0 * PI * x).sin());
        let dt = 1e-3;
        let cfg = SolverConfig1D {
            dt: Some(dt),
            ..Default::default()
        };
        let t_end = 0.1;
        let n = (t_end / dt).round() as usize;
        for _ in 0..n {
            s = step_passive(&s, &p, &cfg).unwrap();
        }
        let decay = (-p.shear_viscosity * (2.0 * PI).powi(2) * t_end).exp();
        for j in 0..g.len() {
            let expect = decay * (2.0 * PI * g.node(j)).sin();
            let got = s.passive.as_slice()[j];
            assert!(
                (got - expect).abs() <= 0.01 * decay,
                "heat decay off: got {got}, expect {expect}"
            );
        }
    }

    #[test]
    fn conservation_over_run() {
        let g = GridX::new(128).unwrap();
        let p = params();
        let cfg = SolverConfig1D::default();
        let gy = GridY::new(17, 8.0).unwrap();
        let spec = make_initial_data(DataFamily::GaussianBump, 0.25, 1.1, g, gy).unwrap();
        let slab = SlabState::from_spec(&spec);
        let mass0: Vec<f64> = slab.slices().iter().map(|s| s.mass()).collect();
        let run = run_slab(&slab, &p, &cfg, 2.0, 0.5, &mut [], false).unwrap();
        for (s, &m0) in run.final_state.slices().iter().zip(&mass0) {
            assert!((s.mass() - m0).abs() < 1e-13);
            assert!(s.momentum().abs() < 1e-13);
            assert!(s.passive_momentum().abs() < 1e-13);
        }
    }

    #[test]
    fn passive_weighted_energy_nonincreasing() {
        let g = GridX::new(64).unwrap();
        let p = params();
        let cfg = SolverConfig1D {
            dt: Some(5e-4),
            ..Default::default()
        };
        let mut s = perturbed(g, 0.2);
        let mut prev = s.passive_energy();
        for _ in 0..200 {
            s = step_limit(&s, &p, &cfg).unwrap();
            s = step_passive(&s, &p, &cfg).unwrap();
            let e = s.passive_energy();
            assert!(e <= prev * (1.0 + 1e-10) + 1e-15, "weighted energy grew: {prev} -> {e}");
            prev = e;
        }
    }

    #[test]
    fn residual_of_equilibrium_is_zero() {
        let g = grid();
        let p = params();
        let mut s0 = State1D::equilibrium(g);
        s0.time = 0.0;
        let mut s1 = State1D::equilibrium(g);
        s1.time = 1e-3;
        let (rm, rq) = residual_limit(&s1, &s0, &p).unwrap();
        assert!(rm.max_abs() < 1e-12);
        assert!(rq.max_abs() < 1e-12);
    }

    #[test]
    fn residual_of_solver_output_shrinks_with_dt() {
        let g = GridX::new(128).unwrap();
        let p = params();
        let s0 = perturbed(g, 0.1);
        let res_for = |dt: f64| -> f64 {
            let cfg = SolverConfig1D {
                dt: Some(dt),
                ..Default::default()
            };
            let mut prev = s0.clone();
            let mut cur = step_limit(&prev, &p, &cfg).unwrap();
            cur = step_passive(&cur, &p, &cfg).unwrap();
            // take a few steps so multistep effects show up
            for _ in 0..3 {
                prev = cur.clone();
                cur = step_limit(&prev, &p, &cfg).unwrap();
                cur = step_passive(&cur, &p, &cfg).unwrap();
            }
            let (rm, _) = residual_limit(&cur, &prev, &p).unwrap();
            spectral::norm_l2(&rm)
        };
        let c = res_for(4e-3);
        let f = res_for(2e-3);
        assert!(
            c / f > 3.0,
            "mass residual not second order: {c:.3e} vs {f:.3e}"
        );
    }

    #[test]
    fn slab_is_permutation_invariant_and_matches_solo_runs() {
        let g = GridX::new(64).unwrap();
        let gy = GridY::new(16, 8.0).unwrap();
        let p = params();
        let cfg = SolverConfig1D {
            dt: Some(1e-3),
            ..Default::default()
        };
        let spec = make_initial_data(DataFamily::GaussianBump, 0.2, 1.1, g, gy).unwrap();
        let slab = SlabState::from_spec(&spec);
        let run = run_slab(&slab, &p, &cfg, 0.2, 0.1, &mut [], false).unwrap();
        // a slab of one slice equals that slice advanced alone
        for iy in [0usize, 7, 15] {
            let solo_gy = GridY::new(16, 8.0).unwrap();
            let mut solo_slices = Vec::new();
            for _ in 0..16 {
                solo_slices.push(slab.slice(iy).clone());
            }
            let solo = SlabState::new(solo_gy, solo_slices).unwrap();
            let solo_run = run_slab(&solo, &p, &cfg, 0.2, 0.1, &mut [], false).unwrap();
            let a = &solo_run.final_state.slice(0).density;
            let b = &run.final_state.slice(iy).density;
            assert_eq!(a.as_slice(), b.as_slice(), "slice {iy} differs");
        }
    }

    #[test]
    fn equilibrium_slab_stays_at_equilibrium() {
        let g = GridX::new(64).unwrap();
        let gy = GridY::new(16, 8.0).unwrap();
        let p = params();
        let spec = make_initial_data(DataFamily::GaussianBump, 0.0, 1.1, g, gy).unwrap();
        let slab = SlabState::from_spec(&spec);
        let run = run_slab(&slab, &p, &SolverConfig1D::default(), 1.0, 0.5, &mut [], false)
            .unwrap();
        for s in run.final_state.slices() {
            assert!(s.density.map(|v| v - 1.0).max_abs() < 1e-13);
            assert!(s.velocity.max_abs() < 1e-13);
        }
    }

    #[test]
    fn huge_dt_reports_positivity_loss() {
        let g = grid();
        let p = params();
        let cfg = SolverConfig1D {
            dt: Some(5.0),
            max_halvings: 0,
            ..Default::default()
        };
        let s = perturbed(g, 0.6);
        let gy = GridY::new(16, 8.0).unwrap();
        let slab = SlabState::new(gy, vec![s; 16]).unwrap();
        let err = run_slab(&slab, &p, &cfg, 10.0, 5.0, &mut [], false).unwrap_err();
        match err {
            Error::PositivityLoss { time, slice } => {
                assert!(time >= 0.0);
                assert!(slice < 16);
            }
            Error::Blowup { .. } => {}
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn energy_identity_residual_second_order() {
        // E0(t2) - E0(t1) + nu * int int w_x^2 should vanish at scheme order
        let g = GridX::new(128).unwrap();
        let p = params();
        let s0 = perturbed(g, 0.2);
        let gy = GridY::new(16, 8.0).unwrap();
        let residual_for = |dt: f64| -> f64 {
            let cfg = SolverConfig1D {
                dt: Some(dt),
                ..Default::default()
            };
            let slab = SlabState::new(gy, vec![s0.clone(); 16]).unwrap();
            let run = run_slab(&slab, &p, &cfg, 1.0, dt, &mut [], true).unwrap();
            // trapezoid in time of the dissipation, slice 0
            let mut diss = 0.0;
            let h = run.history.len();
            for k in 1..h {
                let d0 = run.history[k - 1].slice(0).velocity_dissipation();
                let d1 = run.history[k].slice(0).velocity_dissipation();
                diss += 0.5 * (d0 + d1) * dt;
            }
            let e0 = run.history[0].slice(0).energy(&p);
            let e1 = run.history[h - 1].slice(0).energy(&p);
            (e1 - e0 + p.nu() * diss).abs()
        };
        let coarse = residual_for(2e-3);
        let fine = residual_for(1e-3);
        assert!(
            coarse / fine >= 3.5,
            "energy residual ratio {:.2} below 3.5 ({coarse:.3e} / {fine:.3e})",
            coarse / fine
        );
    }
}

//! Manufactured-solution convergence of both solvers: a smooth exact
//! solution is forced by its analytically computed source; the global error
//! at the final time must shrink at the scheme order under dt refinement
//! (spatial error is negligible here because the manufactured fields are
//! band-limited far below the dealiasing cutoff).

use slowns_core::field::{Field1D, Field2D, FieldRole};
use slowns_core::grid::{Grid2D, GridX, GridY};
use slowns_core::model::FluidParams;
use slowns_core::solver1d::{Integrator1D, Scheme, SolverConfig1D, State1D};
use slowns_core::solver2d::{Integrator2D, State2D};
use std::f64::consts::PI;
use std::sync::Arc;

const AR: f64 = 0.2;
const AW: f64 = 0.15;
const AF: f64 = 0.1;

struct Mms1D {
    params: FluidParams,
}

impl Mms1D {
    fn eta(&self, t: f64, x: f64) -> f64 {
        1.0 + AR * (2.0 * PI * x).sin() * t.cos()
    }
    fn w(&self, t: f64, x: f64) -> f64 {
        AW * (2.0 * PI * x).cos() * t.sin()
    }
    fn fw(&self, t: f64, x: f64) -> f64 {
        AF * (2.0 * PI * x + 0.5).sin() * t.cos()
    }

    /// Source for the conservative system (mass, momentum, passive momentum).
    fn source(&self, t: f64, x: f64) -> (f64, f64, f64) {
        let k = 2.0 * PI;
        let (s, c) = ((k * x).sin(), (k * x).cos());
        let (sf, cf) = ((k * x + 0.5).sin(), (k * x + 0.5).cos());
        let (st, ct) = (t.sin(), t.cos());

        let eta = 1.0 + AR * s * ct;
        let eta_t = -AR * s * st;
        let eta_x = AR * k * c * ct;
        let w = AW * c * st;
        let w_t = AW * c * ct;
        let w_x = -AW * k * s * st;
        let w_xx = -AW * k * k * c * st;
        let f = AF * sf * ct;
        let f_t = -AF * sf * st;
        let f_x = AF * k * cf * ct;
        let f_xx = -AF * k * k * sf * ct;

        let a = self.params.pressure_coeff;
        let g = self.params.adiabatic_index;
        let p_x = a * g * eta.powf(g - 1.0) * eta_x;

        let s_eta = eta_t + eta_x * w + eta * w_x;
        let s_m = (eta_t * w + eta * w_t)
            + (eta_x * w * w + 2.0 * eta * w * w_x)
            + p_x
            - self.params.nu() * w_xx;
        let s_q = (eta_t * f + eta * f_t)
            + (eta_x * w * f + eta * w_x * f + eta * w * f_x)
            - self.params.shear_viscosity * f_xx;
        (s_eta, s_m, s_q)
    }

    fn state(&self, t: f64, grid: GridX) -> State1D {
        State1D::new(
            Field1D::from_fn(grid, FieldRole::Density, |x| self.eta(t, x)),
            Field1D::from_fn(grid, FieldRole::Velocity, |x| self.w(t, x)),
            Field1D::from_fn(grid, FieldRole::Velocity, |x| self.fw(t, x)),
            t,
        )
        .unwrap()
    }
}

fn mms1d_error(params: FluidParams, scheme: Scheme, dt: f64, t_end: f64, n: usize) -> f64 {
    let grid = GridX::new(n).unwrap();
    let mms = Mms1D { params };
    let cfg = SolverConfig1D {
        dt: Some(dt),
        scheme,
        ..Default::default()
    };
    let src = {
        let m = Mms1D { params };
        Arc::new(move |t: f64, x: f64| m.source(t, x))
    };
    let mut it = Integrator1D::new(&mms.state(0.0, grid), &params, &cfg)
        .unwrap()
        .with_source(src);
    it.advance_to(t_end).unwrap();
    let got = it.state();
    let exact = mms.state(t_end, grid);
    let e1 = got.density.zip_with(&exact.density, |a, b| a - b).max_abs();
    let e2 = got.velocity.zip_with(&exact.velocity, |a, b| a - b).max_abs();
    let e3 = got.passive.zip_with(&exact.passive, |a, b| a - b).max_abs();
    e1.max(e2).max(e3)
}

#[test]
fn mms_1d_bdf2_is_second_order() {
    let params = FluidParams::new(0.5, 2.0, 0.04, 0.66).unwrap();
    let t_end = 0.4;
    let errs: Vec<f64> = [1e-3, 5e-4, 2.5e-4]
        .iter()
        .map(|&dt| mms1d_error(params, Scheme::ImexBdf2, dt, t_end, 64))
        .collect();
    println!("dt refinement errors (bdf2): {errs:?}");
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        assert!(
            ratio > 3.4,
            "expected ~4x error reduction per dt halving, got {ratio:.2} ({errs:?})"
        );
    }
}

#[test]
fn mms_1d_gamma_one_second_order() {
    // exercise the logarithmic-potential branch
    let params = FluidParams::new(1.0, 1.0, 0.04, 0.66).unwrap();
    let errs: Vec<f64> = [5e-4, 2.5e-4]
        .iter()
        .map(|&dt| mms1d_error(params, Scheme::ImexBdf2, dt, 0.3, 64))
        .collect();
    let ratio = errs[0] / errs[1];
    assert!(ratio > 3.3, "gamma=1 ratio {ratio:.2} ({errs:?})");
}

#[test]
fn mms_1d_rk4_is_high_order() {
    // small viscosity keeps fully explicit diffusion stable
    let params = FluidParams::new(0.5, 2.0, 0.01, 0.005).unwrap();
    let errs: Vec<f64> = [2e-3, 1e-3]
        .iter()
        .map(|&dt| mms1d_error(params, Scheme::Rk4Explicit, dt, 0.4, 64))
        .collect();
    let ratio = errs[0] / errs[1];
    println!("rk4 errors: {errs:?}, ratio {ratio:.1}");
    assert!(ratio > 10.0, "rk4 should be ~4th order, ratio {ratio:.2}");
}

// ---------------------------------------------------------------------------
// 2D manufactured solution
// ---------------------------------------------------------------------------

struct Mms2D {
    params: FluidParams,
    ky: f64,
}

impl Mms2D {
    fn rho(&self, t: f64, x: f64, y: f64) -> f64 {
        1.0 + AR * (2.0 * PI * x).sin() * (self.ky * y).cos() * t.cos()
    }
    fn u1(&self, t: f64, x: f64, y: f64) -> f64 {
        AW * (2.0 * PI * x).cos() * (self.ky * y).sin() * t.sin()
    }
    fn u2(&self, t: f64, x: f64, y: f64) -> f64 {
        AF * (2.0 * PI * x).sin() * (self.ky * y).sin() * t.cos()
    }

    #[allow(clippy::many_single_char_names)]
    fn source(&self, t: f64, x: f64, y: f64) -> (f64, f64, f64) {
        let kx = 2.0 * PI;
        let ky = self.ky;
        let (sx, cx) = ((kx * x).sin(), (kx * x).cos());
        let (sy, cy) = ((ky * y).sin(), (ky * y).cos());
        let (st, ct) = (t.sin(), t.cos());

        let rho = 1.0 + AR * sx * cy * ct;
        let rho_t = -AR * sx * cy * st;
        let rho_x = AR * kx * cx * cy * ct;
        let rho_y = -AR * ky * sx * sy * ct;

        let u1 = AW * cx * sy * st;
        let u1_t = AW * cx * sy * ct;
        let u1_x = -AW * kx * sx * sy * st;
        let u1_y = AW * ky * cx * cy * st;
        let u1_xx = -AW * kx * kx * cx * sy * st;
        let u1_yy = -AW * ky * ky * cx * sy * st;
        let u1_xy = -AW * kx * ky * sx * cy * st;

        let u2 = AF * sx * sy * ct;
        let u2_t = -AF * sx * sy * st;
        let u2_x = AF * kx * cx * sy * ct;
        let u2_y = AF * ky * sx * cy * ct;
        let u2_xx = -AF * kx * kx * sx * sy * ct;
        let u2_yy = -AF * ky * ky * sx * sy * ct;
        let u2_xy = AF * kx * ky * cx * cy * ct;

        let a = self.params.pressure_coeff;
        let g = self.params.adiabatic_index;
        let mu = self.params.shear_viscosity;
        let mup = self.params.bulk_viscosity;
        let p_x = a * g * rho.powf(g - 1.0) * rho_x;
        let p_y = a * g * rho.powf(g - 1.0) * rho_y;

        let s_rho = rho_t + rho_x * u1 + rho * u1_x + rho_y * u2 + rho * u2_y;

        let s_m1 = (rho_t * u1 + rho * u1_t)
            + (rho_x * u1 * u1 + 2.0 * rho * u1 * u1_x)
            + (rho_y * u1 * u2 + rho * u1_y * u2 + rho * u1 * u2_y)
            + p_x
            - mu * (u1_xx + u1_yy)
            - mup * (u1_xx + u2_xy);

        let s_m2 = (rho_t * u2 + rho * u2_t)
            + (rho_x * u1 * u2 + rho * u1_x * u2 + rho * u1 * u2_x)
            + (rho_y * u2 * u2 + 2.0 * rho * u2 * u2_y)
            + p_y
            - mu * (u2_xx + u2_yy)
            - mup * (u1_xy + u2_yy);

        (s_rho, s_m1, s_m2)
    }

    fn state(&self, t: f64, grid: Grid2D) -> State2D {
        State2D::new(
            Field2D::from_fn(grid, FieldRole::Density, |x, y| self.rho(t, x, y)),
            Field2D::from_fn(grid, FieldRole::Velocity, |x, y| self.u1(t, x, y)),
            Field2D::from_fn(grid, FieldRole::Velocity, |x, y| self.u2(t, x, y)),
            t,
        )
        .unwrap()
    }
}

fn mms2d_error(dt: f64, t_end: f64) -> f64 {
    let params = FluidParams::new(0.5, 2.0, 0.04, 0.66).unwrap();
    let l = 2.0;
    let grid = Grid2D::new(GridX::new(32).unwrap(), GridY::new(32, l).unwrap());
    let mms = Mms2D {
        params,
        ky: PI / l,
    };
    let cfg = SolverConfig1D {
        dt: Some(dt),
        ..Default::default()
    };
    let src = {
        let m = Mms2D {
            params,
            ky: PI / l,
        };
        Arc::new(move |t: f64, x: f64, y: f64| m.source(t, x, y))
    };
    let mut it = Integrator2D::new(&mms.state(0.0, grid), &params, &cfg)
        .unwrap()
        .with_source(src);
    it.advance_to(t_end).unwrap();
    let got = it.state();
    let exact = mms.state(t_end, grid);
    let e1 = got.density.zip_with(&exact.density, |a, b| a - b).max_abs();
    let e2 = got
        .velocity_x
        .zip_with(&exact.velocity_x, |a, b| a - b)
        .max_abs();
    let e3 = got
        .velocity_y
        .zip_with(&exact.velocity_y, |a, b| a - b)
        .max_abs();
    e1.max(e2).max(e3)
}

#[test]
fn mms_2d_bdf2_is_second_order() {
    let errs: Vec<f64> = [4e-3, 2e-3].iter().map(|&dt| mms2d_error(dt, 0.3)).collect();
    let ratio = errs[0] / errs[1];
    println!("2D dt refinement errors: {errs:?}, ratio {ratio:.2}");
    assert!(ratio > 3.4, "2D scheme order too low: ratio {ratio:.2}");
}

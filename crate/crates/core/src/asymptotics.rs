//! Construction of the embedded approximate solution, the forcing it leaves
//! in the 2D momentum equation, the remainder fields, and the diagnostic
//! functionals built from them (energy budget, relative entropy, gradient
//! integrals, perturbation residuals).

use crate::error::{Error, Result};
use crate::field::{Field2D, FieldRole};
use crate::grid::Grid2D;
use crate::model::FluidParams;
use crate::solver1d::SlabState;
use crate::solver2d::{EpsScaling, SlowEmbedder, State2D};
use crate::spectral::{self, Lp};
use serde::Serialize;

// ---------------------------------------------------------------------------
// Slab-side profiles
// ---------------------------------------------------------------------------

/// Slab fields repackaged as 2D fields on the slab grid (y = slow
/// coordinate), the form every y-derivative below works on.
pub fn slab_fields(slab: &SlabState) -> (Field2D, Field2D, Field2D) {
    let grid = Grid2D::new(slab.grid_x(), slab.grid_y());
    let pack = |get: &dyn Fn(&crate::solver1d::State1D) -> &crate::field::Field1D| -> Field2D {
        let mut data = Vec::with_capacity(grid.node_count());
        for s in slab.slices() {
            data.extend_from_slice(get(s).as_slice());
        }
        Field2D::derived(grid, data)
    };
    (
        pack(&|s| &s.density),
        pack(&|s| &s.velocity),
        pack(&|s| &s.passive),
    )
}

/// Per-slice time derivatives of the slab fields, evaluated from the limit
/// system's right-hand sides (exact at the snapshot, no differencing):
///
/// ```text
/// eta_t   = -(eta w)_x
/// w_t     = (nu w_xx - p(eta)_x) / eta - w w_x
/// frakw_t = (mu frakw_xx) / eta - w frakw_x
/// ```
pub fn slab_time_derivatives(
    slab: &SlabState,
    params: &FluidParams,
) -> (Field2D, Field2D, Field2D) {
    let grid = Grid2D::new(slab.grid_x(), slab.grid_y());
    let nx = grid.x.len();
    let mut eta_t = Vec::with_capacity(grid.node_count());
    let mut w_t = Vec::with_capacity(grid.node_count());
    let mut fw_t = Vec::with_capacity(grid.node_count());
    for s in slab.slices() {
        let m = s.density.zip_with(&s.velocity, |r, w| r * w);
        let mx = spectral::ddx(&m);
        let wx = spectral::ddx(&s.velocity);
        let wxx = spectral::ddx_order(&s.velocity, 2);
        let px = spectral::ddx(&s.density.map(|r| params.pressure_raw(r)));
        let fx = spectral::ddx(&s.passive);
        let fxx = spectral::ddx_order(&s.passive, 2);
        for j in 0..nx {
            let r = s.density.as_slice()[j];
            let w = s.velocity.as_slice()[j];
            eta_t.push(-mx.as_slice()[j]);
            w_t.push((params.nu() * wxx.as_slice()[j] - px.as_slice()[j]) / r - w * wx.as_slice()[j]);
            fw_t.push(params.shear_viscosity * fxx.as_slice()[j] / r - w * fx.as_slice()[j]);
        }
    }
    (
        Field2D::derived(grid, eta_t),
        Field2D::derived(grid, w_t),
        Field2D::derived(grid, fw_t),
    )
}

// ---------------------------------------------------------------------------
// Approximate solution and forcing
// ---------------------------------------------------------------------------

/// The slow embedding of the limit solution, together with its exact time
/// derivatives and the O(eps) source it leaves in the continuity equation.
#[derive(Debug, Clone)]
pub struct ApproxSolution {
    pub density: Field2D,
    pub velocity_x: Field2D,
    pub velocity_y: Field2D,
    pub ddt_density: Field2D,
    pub ddt_velocity_x: Field2D,
    pub ddt_velocity_y: Field2D,
    /// `eps [ (eta frakw)_y ]_eps`: the embedded continuity equation reads
    /// `d/dt rho_a + div(rho_a u_a) = continuity_source`.
    pub continuity_source: Field2D,
    pub eps: f64,
    pub time: f64,
}

impl ApproxSolution {
    pub fn grid(&self) -> Grid2D {
        self.density.grid()
    }
}

/// Embed the slab state at its current time onto the 2D grid.
pub fn build_approx(
    slab: &SlabState,
    eps: EpsScaling,
    grid2d: Grid2D,
    params: &FluidParams,
) -> Result<ApproxSolution> {
    let slab_grid = Grid2D::new(slab.grid_x(), slab.grid_y());
    let emb = SlowEmbedder::new(slab_grid, grid2d, eps)?;
    let (eta, w, fw) = slab_fields(slab);
    let (eta_t, w_t, fw_t) = slab_time_derivatives(slab, params);
    let flux_y = spectral::ddy2d(&eta.zip_with(&fw, |r, v| r * v));
    let e = eps.value();

    let density = emb.embed(&eta).with_role(FieldRole::Density);
    if density.min() <= 0.0 {
        return Err(Error::domain("embedded density lost positivity"));
    }
    Ok(ApproxSolution {
        density,
        velocity_x: emb.embed(&w),
        velocity_y: emb.embed(&fw),
        ddt_density: emb.embed(&eta_t),
        ddt_velocity_x: emb.embed(&w_t),
        ddt_velocity_y: emb.embed(&fw_t),
        continuity_source: emb.embed(&flux_y).map(|v| e * v),
        eps: e,
        time: slab.time,
    })
}

/// The momentum forcing `G = (G1, G2)` felt by the embedded solution:
///
/// ```text
/// G1 = -eps [eta frakw w_y]   + mu  eps^2 [w_yy]     + mu' eps [frakw_xy]
/// G2 = -eps [eta frakw frakw_y] + nu eps^2 [frakw_yy] + mu' eps [w_xy]
///      - eps [p(eta)_y]
/// ```
///
/// y-derivatives are spectral across the slab's slow grid; each derived
/// profile is embedded afterwards (derivative first, then embed).
pub fn forcing_g(
    slab: &SlabState,
    eps: EpsScaling,
    grid2d: Grid2D,
    params: &FluidParams,
) -> Result<(Field2D, Field2D)> {
    let slab_grid = Grid2D::new(slab.grid_x(), slab.grid_y());
    let emb = SlowEmbedder::new(slab_grid, grid2d, eps)?;
    let (eta, w, fw) = slab_fields(slab);
    let e = eps.value();
    let mu = params.shear_viscosity;
    let mup = params.bulk_viscosity;
    let nu = params.nu();

    let w_y = spectral::ddy2d(&w);
    let w_yy = spectral::ddy2(&w, 2);
    let fw_y = spectral::ddy2d(&fw);
    let fw_yy = spectral::ddy2(&fw, 2);
    let w_xy = spectral::ddy2d(&spectral::ddx2d(&w));
    let fw_xy = spectral::ddy2d(&spectral::ddx2d(&fw));
    let p_y = spectral::ddy2d(&eta.map(|r| params.pressure_raw(r)));

    let conv1 = eta.zip_with(&fw, |r, v| r * v).zip_with(&w_y, |a, b| a * b);
    let conv2 = eta.zip_with(&fw, |r, v| r * v).zip_with(&fw_y, |a, b| a * b);

    let g1_slab = conv1.zip_with(&w_yy, |c, d| -e * c + mu * e * e * d).zip_with(
        &fw_xy,
        |acc, d| acc + mup * e * d,
    );
    let g2_slab = conv2
        .zip_with(&fw_yy, |c, d| -e * c + nu * e * e * d)
        .zip_with(&w_xy, |acc, d| acc + mup * e * d)
        .zip_with(&p_y, |acc, d| acc - e * d);

    Ok((emb.embed(&g1_slab), emb.embed(&g2_slab)))
}

// ---------------------------------------------------------------------------
// Remainder fields
// ---------------------------------------------------------------------------

/// The diagnostic bundle at one time: density gap, velocity gap, its curl,
/// its material rate, and the effective viscous flux
/// `nu div R - (p(rho) - p(rho_a))`.
#[derive(Debug, Clone)]
pub struct RemainderFields {
    /// `rho - rho_a`
    pub density: Field2D,
    /// `u - u_a`, both components
    pub velocity: [Field2D; 2],
    /// `curl R = d R1/dy - d R2/dx`
    pub vorticity: Field2D,
    /// `D_t R = d/dt R + u . grad R` (time part one-sided against stored
    /// remainders; zero when no history is supplied)
    pub velocity_rate: [Field2D; 2],
    /// `nu div R - (p(rho) - p(rho_a))`
    pub viscous_flux: Field2D,
    pub time: f64,
}

/// Assemble the remainder fields. `prev` holds earlier remainders, most
/// recent first; with two of them the time part of `D_t R` is the
/// second-order one-sided difference on the sample stride, with one it is
/// first order, with none it is dropped.
pub fn remainder(
    full: &State2D,
    approx: &ApproxSolution,
    prev: &[&RemainderFields],
    params: &FluidParams,
) -> Result<RemainderFields> {
    if full.grid() != approx.grid() {
        return Err(Error::mismatch("full and approx on different grids"));
    }
    if (full.time - approx.time).abs() > 1e-9 {
        return Err(Error::mismatch(format!(
            "full at t = {} but approx at t = {}",
            full.time, approx.time
        )));
    }
    let rho_gap = full.density.zip_with(&approx.density, |a, b| a - b);
    let r1 = full.velocity_x.zip_with(&approx.velocity_x, |a, b| a - b);
    let r2 = full.velocity_y.zip_with(&approx.velocity_y, |a, b| a - b);
    let vorticity = spectral::ddy2d(&r1).zip_with(&spectral::ddx2d(&r2), |a, b| a - b);

    let div_r = spectral::ddx2d(&r1).zip_with(&spectral::ddy2d(&r2), |a, b| a + b);
    let p_gap = full
        .density
        .zip_with(&approx.density, |a, b| params.pressure_raw(a) - params.pressure_raw(b));
    let viscous_flux = div_r.zip_with(&p_gap, |d, p| params.nu() * d - p);

    let ddt = |comp: usize| -> Field2D {
        let cur = if comp == 0 { &r1 } else { &r2 };
        match prev {
            [] => Field2D::zeros(full.grid()),
            [p1] => {
                let dt = full.time - p1.time;
                cur.zip_with(&p1.velocity[comp], |a, b| (a - b) / dt)
            }
            [p1, p2, ..] => {
                let dt = full.time - p1.time;
                cur.zip_with(&p1.velocity[comp], |a, b| (3.0 * a - 4.0 * b) / (2.0 * dt))
                    .zip_with(&p2.velocity[comp], |acc, c| acc + c / (2.0 * dt))
            }
        }
    };
    let advect = |f: &Field2D| -> Field2D {
        let fx = spectral::ddx2d(f);
        let fy = spectral::ddy2d(f);
        full.velocity_x
            .zip_with(&fx, |u, d| u * d)
            .zip_with(&full.velocity_y.zip_with(&fy, |u, d| u * d), |a, b| a + b)
    };
    let rate1 = ddt(0).zip_with(&advect(&r1), |a, b| a + b);
    let rate2 = ddt(1).zip_with(&advect(&r2), |a, b| a + b);

    Ok(RemainderFields {
        density: rho_gap,
        velocity: [r1, r2],
        vorticity,
        velocity_rate: [rate1, rate2],
        viscous_flux,
        time: full.time,
    })
}

impl RemainderFields {
    pub fn grid(&self) -> Grid2D {
        self.density.grid()
    }

    /// Pointwise `|grad R|` (Frobenius over both components).
    pub fn grad_velocity_magnitude(&self) -> Field2D {
        let g = [
            spectral::ddx2d(&self.velocity[0]),
            spectral::ddy2d(&self.velocity[0]),
            spectral::ddx2d(&self.velocity[1]),
            spectral::ddy2d(&self.velocity[1]),
        ];
        let mut out = vec![0.0; self.density.grid().node_count()];
        for (j, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for gi in &g {
                let v = gi.as_slice()[j];
                s += v * v;
            }
            *o = s.sqrt();
        }
        Field2D::derived(self.density.grid(), out)
    }

    fn sq_l2(f: &Field2D) -> f64 {
        let n = spectral::norm_l2_2d(f);
        n * n
    }

    /// The five sup-tracked integrals of the energy functional:
    /// `int |R|^2, |rho_gap|^2, |grad R|^2, |D_t R|^2, |grad omega|^2`.
    pub fn sup_terms(&self) -> [f64; 5] {
        let grad_r = self.grad_velocity_magnitude();
        let grad_o_sq = spectral::grad_norm_sq(&self.vorticity);
        [
            Self::sq_l2(&self.velocity[0]) + Self::sq_l2(&self.velocity[1]),
            Self::sq_l2(&self.density),
            Self::sq_l2(&grad_r),
            Self::sq_l2(&self.velocity_rate[0]) + Self::sq_l2(&self.velocity_rate[1]),
            grad_o_sq,
        ]
    }

    /// The four time-integrated integrands:
    /// `int |grad R|^2, |D_t R|^2, |grad omega|^2, |grad D_t R|^2`.
    pub fn integrand_terms(&self) -> [f64; 4] {
        let grad_r = self.grad_velocity_magnitude();
        [
            Self::sq_l2(&grad_r),
            Self::sq_l2(&self.velocity_rate[0]) + Self::sq_l2(&self.velocity_rate[1]),
            spectral::grad_norm_sq(&self.vorticity),
            spectral::grad_norm_sq(&self.velocity_rate[0])
                + spectral::grad_norm_sq(&self.velocity_rate[1]),
        ]
    }
}

// ---------------------------------------------------------------------------
// Energy budget
// ---------------------------------------------------------------------------

/// Per-term breakdown of the energy functional.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct BudgetBreakdown {
    pub sup_velocity_sq: f64,
    pub sup_density_sq: f64,
    pub sup_grad_velocity_sq: f64,
    pub sup_rate_sq: f64,
    pub sup_grad_vorticity_sq: f64,
    pub int_grad_velocity_sq: f64,
    pub int_rate_sq: f64,
    pub int_grad_vorticity_sq: f64,
    pub int_grad_rate_sq: f64,
}

/// Sup norms of the forcing over the run (`dt_l2` differences consecutive
/// forcing snapshots).
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct GNorms {
    pub l2: f64,
    pub linf: f64,
    pub dt_l2: f64,
}

/// The Theorem-style energy functional `E(T)` with its breakdown, and
/// `theta(T) = sup_t ||rho_gap||_inf`.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct ErrorBudget {
    pub e_eps: f64,
    pub theta_eps: f64,
    pub breakdown: BudgetBreakdown,
    pub g_norms: GNorms,
}

impl ErrorBudget {
    /// Sum of sup terms plus time integrals (the scalar reported as `E`).
    fn total(breakdown: &BudgetBreakdown) -> f64 {
        breakdown.sup_velocity_sq
            + breakdown.sup_density_sq
            + breakdown.sup_grad_velocity_sq
            + breakdown.sup_rate_sq
            + breakdown.sup_grad_vorticity_sq
            + breakdown.int_grad_velocity_sq
            + breakdown.int_rate_sq
            + breakdown.int_grad_vorticity_sq
            + breakdown.int_grad_rate_sq
    }
}

/// Streaming accumulator for the energy budget over a uniformly sampled
/// remainder history (trapezoid rule for the time integrals).
#[derive(Default)]
pub struct BudgetAccumulator {
    breakdown: BudgetBreakdown,
    theta: f64,
    prev_integrands: Option<[f64; 4]>,
    prev_time: f64,
    prev_g: Option<(Field2D, Field2D, f64)>,
    g_norms: GNorms,
    count: usize,
}

impl BudgetAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rem: &RemainderFields) {
        let sup = rem.sup_terms();
        let b = &mut self.breakdown;
        b.sup_velocity_sq = b.sup_velocity_sq.max(sup[0]);
        b.sup_density_sq = b.sup_density_sq.max(sup[1]);
        b.sup_grad_velocity_sq = b.sup_grad_velocity_sq.max(sup[2]);
        b.sup_rate_sq = b.sup_rate_sq.max(sup[3]);
        b.sup_grad_vorticity_sq = b.sup_grad_vorticity_sq.max(sup[4]);
        self.theta = self.theta.max(rem.density.max_abs());

        let ints = rem.integrand_terms();
        if let Some(prev) = self.prev_integrands {
            let dt = rem.time - self.prev_time;
            b.int_grad_velocity_sq += 0.5 * (prev[0] + ints[0]) * dt;
            b.int_rate_sq += 0.5 * (prev[1] + ints[1]) * dt;
            b.int_grad_vorticity_sq += 0.5 * (prev[2] + ints[2]) * dt;
            b.int_grad_rate_sq += 0.5 * (prev[3] + ints[3]) * dt;
        }
        self.prev_integrands = Some(ints);
        self.prev_time = rem.time;
        self.count += 1;
    }

    /// Track the forcing alongside the remainder history.
    pub fn push_forcing(&mut self, g1: &Field2D, g2: &Field2D, time: f64) {
        let l2 = (spectral::norm_l2_2d(g1).powi(2) + spectral::norm_l2_2d(g2).powi(2)).sqrt();
        let linf = g1.max_abs().max(g2.max_abs());
        self.g_norms.l2 = self.g_norms.l2.max(l2);
        self.g_norms.linf = self.g_norms.linf.max(linf);
        if let Some((p1, p2, pt)) = &self.prev_g {
            let dt = time - pt;
            if dt > 0.0 {
                let d1 = g1.zip_with(p1, |a, b| (a - b) / dt);
                let d2 = g2.zip_with(p2, |a, b| (a - b) / dt);
                let dl2 =
                    (spectral::norm_l2_2d(&d1).powi(2) + spectral::norm_l2_2d(&d2).powi(2)).sqrt();
                self.g_norms.dt_l2 = self.g_norms.dt_l2.max(dl2);
            }
        }
        self.prev_g = Some((g1.clone(), g2.clone(), time));
    }

    pub fn finish(self) -> Result<ErrorBudget> {
        if self.count == 0 {
            return Err(Error::EmptyHistory("no remainder snapshots pushed".into()));
        }
        Ok(ErrorBudget {
            e_eps: ErrorBudget::total(&self.breakdown),
            theta_eps: self.theta,
            breakdown: self.breakdown,
            g_norms: self.g_norms,
        })
    }
}

/// Budget of a materialized history (uniform sampling assumed).
pub fn energy_budget(history: &[RemainderFields]) -> Result<ErrorBudget> {
    let mut acc = BudgetAccumulator::new();
    for r in history {
        acc.push(r);
    }
    acc.finish()
}

// ---------------------------------------------------------------------------
// Relative entropy
// ---------------------------------------------------------------------------

/// Relative energy functional
/// `E1 = int ( rho |u - u_ref|^2 / 2 + P(rho) - P(ref) - P'(ref)(rho - ref) )`.
pub fn relative_entropy(
    full: &State2D,
    ref_rho: &Field2D,
    ref_u: (&Field2D, &Field2D),
    params: &FluidParams,
) -> Result<f64> {
    spectral::require_same_grid(&full.density, ref_rho)?;
    if ref_rho.min() <= 0.0 {
        return Err(Error::domain("reference density must be positive"));
    }
    let cell = full.grid().cell();
    let n = full.grid().node_count();
    let rho = full.density.as_slice();
    let u1 = full.velocity_x.as_slice();
    let u2 = full.velocity_y.as_slice();
    let rr = ref_rho.as_slice();
    let v1 = ref_u.0.as_slice();
    let v2 = ref_u.1.as_slice();
    let mut total = 0.0;
    for j in 0..n {
        let du1 = u1[j] - v1[j];
        let du2 = u2[j] - v2[j];
        total += 0.5 * rho[j] * (du1 * du1 + du2 * du2)
            + params.relative_potential_raw(rho[j], rr[j]);
    }
    Ok(total * cell)
}

/// A reference pair snapshot with its exact time derivatives.
#[derive(Debug, Clone)]
pub struct RefSnapshot {
    pub rho: Field2D,
    pub u1: Field2D,
    pub u2: Field2D,
    pub ddt_rho: Field2D,
    pub ddt_u1: Field2D,
    pub ddt_u2: Field2D,
}

impl RefSnapshot {
    pub fn from_approx(a: &ApproxSolution) -> Self {
        RefSnapshot {
            rho: a.density.clone(),
            u1: a.velocity_x.clone(),
            u2: a.velocity_y.clone(),
            ddt_rho: a.ddt_density.clone(),
            ddt_u1: a.ddt_velocity_x.clone(),
            ddt_u2: a.ddt_velocity_y.clone(),
        }
    }

    /// Build from closures `f(x, y, t)` for the fields and their exact time
    /// derivatives (a manufactured reference pair).
    #[allow(clippy::type_complexity)]
    pub fn manufactured(
        grid: Grid2D,
        t: f64,
        rho: &dyn Fn(f64, f64, f64) -> f64,
        u1: &dyn Fn(f64, f64, f64) -> f64,
        u2: &dyn Fn(f64, f64, f64) -> f64,
        ddt_rho: &dyn Fn(f64, f64, f64) -> f64,
        ddt_u1: &dyn Fn(f64, f64, f64) -> f64,
        ddt_u2: &dyn Fn(f64, f64, f64) -> f64,
    ) -> Self {
        let make = |f: &dyn Fn(f64, f64, f64) -> f64| {
            Field2D::from_fn(grid, FieldRole::Derived, |x, y| f(x, y, t))
        };
        RefSnapshot {
            rho: make(rho),
            u1: make(u1),
            u2: make(u2),
            ddt_rho: make(ddt_rho),
            ddt_u1: make(ddt_u1),
            ddt_u2: make(ddt_u2),
        }
    }
}

/// The integrand-level remainder of the relative entropy equality:
///
/// ```text
/// R(t) = int rho Dt(u_ref) . (u_ref - u)
///      + int mu grad u_ref : grad(u_ref - u) + mu' div u_ref div(u_ref - u)
///      + int (rho_ref - rho) dP'(rho_ref)/dt + (rho_ref u_ref - rho u) . grad P'(rho_ref)
///      - int div u_ref ( p(rho) - p(rho_ref) )
/// ```
///
/// with `Dt = d/dt + u . grad` (the material derivative along the computed
/// flow).
fn entropy_rhs_term(full: &State2D, rf: &RefSnapshot, params: &FluidParams) -> f64 {
    let grid = full.grid();
    let cell = grid.cell();
    let n = grid.node_count();
    let mu = params.shear_viscosity;
    let mup = params.bulk_viscosity;

    let u1x = spectral::ddx2d(&rf.u1);
    let u1y = spectral::ddy2d(&rf.u1);
    let u2x = spectral::ddx2d(&rf.u2);
    let u2y = spectral::ddy2d(&rf.u2);
    let f1x = spectral::ddx2d(&full.velocity_x);
    let f1y = spectral::ddy2d(&full.velocity_x);
    let f2x = spectral::ddx2d(&full.velocity_y);
    let f2y = spectral::ddy2d(&full.velocity_y);

    let p_ref_prime = rf.rho.map(|r| params.potential_derivative_raw(r));
    let gpx = spectral::ddx2d(&p_ref_prime);
    let gpy = spectral::ddy2d(&p_ref_prime);

    let mut total = 0.0;
    for j in 0..n {
        let rho = full.density.as_slice()[j];
        let u1 = full.velocity_x.as_slice()[j];
        let u2 = full.velocity_y.as_slice()[j];
        let v1 = rf.u1.as_slice()[j];
        let v2 = rf.u2.as_slice()[j];
        let rr = rf.rho.as_slice()[j];
        let d1 = v1 - u1;
        let d2 = v2 - u2;

        // material derivative of the reference velocity along the flow
        let dt_v1 = rf.ddt_u1.as_slice()[j] + u1 * u1x.as_slice()[j] + u2 * u1y.as_slice()[j];
        let dt_v2 = rf.ddt_u2.as_slice()[j] + u1 * u2x.as_slice()[j] + u2 * u2y.as_slice()[j];
        total += rho * (dt_v1 * d1 + dt_v2 * d2);

        // viscous cross terms
        total += mu
            * (u1x.as_slice()[j] * (u1x.as_slice()[j] - f1x.as_slice()[j])
                + u1y.as_slice()[j] * (u1y.as_slice()[j] - f1y.as_slice()[j])
                + u2x.as_slice()[j] * (u2x.as_slice()[j] - f2x.as_slice()[j])
                + u2y.as_slice()[j] * (u2y.as_slice()[j] - f2y.as_slice()[j]));
        let div_ref = u1x.as_slice()[j] + u2y.as_slice()[j];
        let div_full = f1x.as_slice()[j] + f2y.as_slice()[j];
        total += mup * div_ref * (div_ref - div_full);

        // pressure-potential terms
        let ddt_pprime = params.pressure_derivative(rr).unwrap_or(0.0) / rr
            * rf.ddt_rho.as_slice()[j];
        total += (rr - rho) * ddt_pprime
            + (rr * v1 - rho * u1) * gpx.as_slice()[j]
            + (rr * v2 - rho * u2) * gpy.as_slice()[j];

        // pressure gap against the reference divergence
        total -= div_ref * (params.pressure_raw(rho) - params.pressure_raw(rr));
    }
    total * cell
}

/// Dissipation of the velocity gap,
/// `int mu |grad(u - u_ref)|^2 + mu' |div(u - u_ref)|^2`.
fn gap_dissipation(full: &State2D, rf: &RefSnapshot, params: &FluidParams) -> f64 {
    let d1 = full.velocity_x.zip_with(&rf.u1, |a, b| a - b);
    let d2 = full.velocity_y.zip_with(&rf.u2, |a, b| a - b);
    let gd = spectral::grad_norm_sq(&d1) + spectral::grad_norm_sq(&d2);
    let div = spectral::ddx2d(&d1).zip_with(&spectral::ddy2d(&d2), |a, b| a + b);
    params.shear_viscosity * gd
        + params.bulk_viscosity * spectral::integrate_xy(&div.zip_with(&div, |a, b| a * b))
}

/// Assemble both sides of the relative entropy equality over a sampled
/// solution history and return `|LHS - RHS|`:
///
/// `E1(T) - E1(0) + int_0^T dissipation = int_0^T R(t) dt`.
///
/// `reference` supplies the reference pair at each sample time.
pub fn entropy_identity_residual(
    history: &[(f64, State2D)],
    reference: &dyn Fn(f64, Grid2D) -> RefSnapshot,
    params: &FluidParams,
) -> Result<f64> {
    if history.len() < 2 {
        return Err(Error::EmptyHistory(
            "entropy identity needs at least two samples".into(),
        ));
    }
    let grid = history[0].1.grid();
    let first = reference(history[0].0, grid);
    let last = reference(history[history.len() - 1].0, grid);
    let e1_first = relative_entropy(
        &history[0].1,
        &first.rho,
        (&first.u1, &first.u2),
        params,
    )?;
    let e1_last = relative_entropy(
        &history[history.len() - 1].1,
        &last.rho,
        (&last.u1, &last.u2),
        params,
    )?;

    let mut diss_int = 0.0;
    let mut rhs_int = 0.0;
    let mut prev: Option<(f64, f64, f64)> = None;
    for (t, state) in history {
        let rf = reference(*t, grid);
        let diss = gap_dissipation(state, &rf, params);
        let rhs = entropy_rhs_term(state, &rf, params);
        if let Some((tp, dp, rp)) = prev {
            let dt = t - tp;
            diss_int += 0.5 * (dp + diss) * dt;
            rhs_int += 0.5 * (rp + rhs) * dt;
        }
        prev = Some((*t, diss, rhs));
    }

    Ok((e1_last - e1_first + diss_int - rhs_int).abs())
}

// ---------------------------------------------------------------------------
// Gradient integrals
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct GradientIntegrals {
    /// `int_0^T int |grad R|^3`
    pub i3: f64,
    /// `int_0^T int |grad R|^4`
    pub i4: f64,
    /// `int_0^T int |grad R|^6`
    pub i6: f64,
}

/// Time-integrated L3/L4/L6 powers of `|grad R|` (trapezoid in time).
pub fn gradient_integrals(history: &[RemainderFields]) -> GradientIntegrals {
    let mut out = GradientIntegrals::default();
    let mut prev: Option<(f64, [f64; 3])> = None;
    for rem in history {
        let g = rem.grad_velocity_magnitude();
        let vals = [
            spectral::norm_lp_2d(&g, Lp::Three).powi(3),
            spectral::norm_lp_2d(&g, Lp::Four).powi(4),
            spectral::norm_lp_2d(&g, Lp::Six).powi(6),
        ];
        if let Some((tp, vp)) = prev {
            let dt = rem.time - tp;
            out.i3 += 0.5 * (vp[0] + vals[0]) * dt;
            out.i4 += 0.5 * (vp[1] + vals[1]) * dt;
            out.i6 += 0.5 * (vp[2] + vals[2]) * dt;
        }
        prev = Some((rem.time, vals));
    }
    out
}

// ---------------------------------------------------------------------------
// Perturbation residual
// ---------------------------------------------------------------------------

/// Everything known about one sample time of a paired run.
#[derive(Clone)]
pub struct PairSnapshot {
    pub full: State2D,
    pub approx: ApproxSolution,
    pub remainder: RemainderFields,
    pub forcing: (Field2D, Field2D),
}

#[derive(Debug, Clone, Copy)]
pub struct PerturbationResidual {
    pub mass_l2: f64,
    pub momentum_l2: f64,
}

/// Norms of [`perturbation_residual_fields`].
pub fn perturbation_residual(
    prev: &PairSnapshot,
    cur: &PairSnapshot,
    params: &FluidParams,
) -> Result<PerturbationResidual> {
    let (r_mass, [rm1, rm2]) = perturbation_residual_fields(prev, cur, params)?;
    Ok(PerturbationResidual {
        mass_l2: spectral::norm_l2_2d(&r_mass),
        momentum_l2: (spectral::norm_l2_2d(&rm1).powi(2) + spectral::norm_l2_2d(&rm2).powi(2))
            .sqrt(),
    })
}

/// Discrete residual of the coupled perturbation system evaluated at the
/// midpoint of two consecutive snapshots:
///
/// ```text
/// d/dt rho_gap + div(rho R) + div(rho_gap u_a) + continuity_source = r_mass
/// rho Dt R - mu Lap R - mu' grad div R + grad(p(rho) - p(rho_a))
///     + rho R . grad u_a + rho_gap (d/dt u_a + u_a . grad u_a) - G = r_mom
/// ```
pub fn perturbation_residual_fields(
    prev: &PairSnapshot,
    cur: &PairSnapshot,
    params: &FluidParams,
) -> Result<(Field2D, [Field2D; 2])> {
    let dt = cur.full.time - prev.full.time;
    if !(dt > 0.0) {
        return Err(Error::mismatch("cur must follow prev in time"));
    }
    let mid = |a: &Field2D, b: &Field2D| a.zip_with(b, |x, y| 0.5 * (x + y));

    let rho = mid(&prev.full.density, &cur.full.density);
    let u1 = mid(&prev.full.velocity_x, &cur.full.velocity_x);
    let u2 = mid(&prev.full.velocity_y, &cur.full.velocity_y);
    let rho_a = mid(&prev.approx.density, &cur.approx.density);
    let ua1 = mid(&prev.approx.velocity_x, &cur.approx.velocity_x);
    let ua2 = mid(&prev.approx.velocity_y, &cur.approx.velocity_y);
    let r1 = mid(&prev.remainder.velocity[0], &cur.remainder.velocity[0]);
    let r2 = mid(&prev.remainder.velocity[1], &cur.remainder.velocity[1]);
    let rho_gap = mid(&prev.remainder.density, &cur.remainder.density);
    let g1 = mid(&prev.forcing.0, &cur.forcing.0);
    let g2 = mid(&prev.forcing.1, &cur.forcing.1);
    let src = mid(&prev.approx.continuity_source, &cur.approx.continuity_source);
    // finite differences here, not the analytic slab derivatives: every time
    // derivative in the residual must use the same stencil or the residual
    // stops being the exact difference of the full and embedded residuals
    let ddt_ua1 = cur
        .approx
        .velocity_x
        .zip_with(&prev.approx.velocity_x, |a, b| (a - b) / dt);
    let ddt_ua2 = cur
        .approx
        .velocity_y
        .zip_with(&prev.approx.velocity_y, |a, b| (a - b) / dt);

    // mass line
    let gap_t = cur
        .remainder
        .density
        .zip_with(&prev.remainder.density, |a, b| (a - b) / dt);
    let flux1 = rho.zip_with(&r1, |r, v| r * v).zip_with(&rho_gap.zip_with(&ua1, |g, v| g * v), |a, b| a + b);
    let flux2 = rho.zip_with(&r2, |r, v| r * v).zip_with(&rho_gap.zip_with(&ua2, |g, v| g * v), |a, b| a + b);
    let div_flux = spectral::ddx2d(&flux1).zip_with(&spectral::ddy2d(&flux2), |a, b| a + b);
    let r_mass = gap_t
        .zip_with(&div_flux, |a, b| a + b)
        .zip_with(&src, |a, b| a + b);

    // momentum line
    let ua1x = spectral::ddx2d(&ua1);
    let ua1y = spectral::ddy2d(&ua1);
    let ua2x = spectral::ddx2d(&ua2);
    let ua2y = spectral::ddy2d(&ua2);
    let mom = |comp: usize| -> Field2D {
        let (rc, rp, rcur) = match comp {
            0 => (&r1, &prev.remainder.velocity[0], &cur.remainder.velocity[0]),
            _ => (&r2, &prev.remainder.velocity[1], &cur.remainder.velocity[1]),
        };
        let r_t = rcur.zip_with(rp, |a, b| (a - b) / dt);
        let rx = spectral::ddx2d(rc);
        let ry = spectral::ddy2d(rc);
        let conv = u1.zip_with(&rx, |u, d| u * d).zip_with(&u2.zip_with(&ry, |u, d| u * d), |a, b| a + b);
        let dtr = r_t.zip_with(&conv, |a, b| a + b);
        let rho_dtr = rho.zip_with(&dtr, |r, v| r * v);

        let lap = spectral::ddx2(rc, 2).zip_with(&spectral::ddy2(rc, 2), |a, b| a + b);
        let div_r = spectral::ddx2d(&r1).zip_with(&spectral::ddy2d(&r2), |a, b| a + b);
        let grad_div = if comp == 0 {
            spectral::ddx2d(&div_r)
        } else {
            spectral::ddy2d(&div_r)
        };
        let p_gap = rho.zip_with(&rho_a, |a, b| params.pressure_raw(a) - params.pressure_raw(b));
        let grad_p = if comp == 0 {
            spectral::ddx2d(&p_gap)
        } else {
            spectral::ddy2d(&p_gap)
        };

        // rho R . grad u_a
        let (gx, gy) = if comp == 0 { (&ua1x, &ua1y) } else { (&ua2x, &ua2y) };
        let stretch = rho.zip_with(
            &r1.zip_with(gx, |v, d| v * d).zip_with(&r2.zip_with(gy, |v, d| v * d), |a, b| a + b),
            |r, v| r * v,
        );

        // rho_gap (ddt u_a + u_a . grad u_a)
        let ddt_ua = if comp == 0 { &ddt_ua1 } else { &ddt_ua2 };
        let conv_a = ua1.zip_with(gx, |u, d| u * d).zip_with(&ua2.zip_with(gy, |u, d| u * d), |a, b| a + b);
        let accel = rho_gap.zip_with(&ddt_ua.zip_with(&conv_a, |a, b| a + b), |g, v| g * v);

        let g = if comp == 0 { &g1 } else { &g2 };
        rho_dtr
            .zip_with(&lap, |a, b| a - params.shear_viscosity * b)
            .zip_with(&grad_div, |a, b| a - params.bulk_viscosity * b)
            .zip_with(&grad_p, |a, b| a + b)
            .zip_with(&stretch, |a, b| a + b)
            .zip_with(&accel, |a, b| a + b)
            .zip_with(g, |a, b| a - b)
    };
    let rm1 = mom(0);
    let rm2 = mom(1);
    Ok((r_mass, [rm1, rm2]))
}

/// Assemble the full snapshot bundle for one sample time of a paired run.
pub fn pair_snapshot(
    slab: &SlabState,
    full: &State2D,
    eps: EpsScaling,
    params: &FluidParams,
    prev: &[&RemainderFields],
) -> Result<PairSnapshot> {
    let approx = build_approx(slab, eps, full.grid(), params)?;
    let forcing = forcing_g(slab, eps, full.grid(), params)?;
    let rem = remainder(full, &approx, prev, params)?;
    Ok(PairSnapshot {
        full: full.clone(),
        approx,
        remainder: rem,
        forcing,
    })
}

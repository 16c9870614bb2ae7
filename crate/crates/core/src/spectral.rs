//! Spectral differentiation, quadrature, norms, and periodic resampling.
//!
//! Fields live on uniform periodic grids, so every derivative is the exact
//! derivative of the trigonometric interpolant: transform, multiply by
//! `(i k)^order`, transform back. Quadrature is the rectangle rule, which is
//! spectrally exact for trigonometric polynomials below the Nyquist mode.
//!
//! Conventions: forward transforms are normalized by `1/n`, so `coeffs[m]`
//! are the Fourier coefficients of `f(x) = sum_m c_m exp(i k_m x)`. For even
//! `n` the unpaired Nyquist mode is dropped from derivatives.

use crate::error::{Error, Result};
use crate::field::{Field1D, Field2D};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

type PlanPair = (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>);

fn plan_cache() -> &'static Mutex<HashMap<usize, PlanPair>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, PlanPair>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Cached forward/inverse FFT pair for one transform length.
#[derive(Clone)]
pub struct Transform {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Transform {
    pub fn get(n: usize) -> Transform {
        let mut cache = plan_cache().lock().unwrap();
        let (fwd, inv) = cache
            .entry(n)
            .or_insert_with(|| {
                let mut planner = FftPlanner::new();
                (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
            })
            .clone();
        Transform { n, fwd, inv }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Fourier coefficients of real samples, normalized by `1/n`.
    pub fn coeffs(&self, samples: &[f64]) -> Vec<Complex64> {
        debug_assert_eq!(samples.len(), self.n);
        let mut buf: Vec<Complex64> = samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.coeffs_inplace(&mut buf);
        buf
    }

    /// In-place forward transform of a complex buffer (normalized by `1/n`).
    pub fn coeffs_inplace(&self, buf: &mut [Complex64]) {
        debug_assert_eq!(buf.len(), self.n);
        self.fwd.process(buf);
        let scale = 1.0 / self.n as f64;
        for c in buf.iter_mut() {
            *c *= scale;
        }
    }

    /// Real samples from Fourier coefficients.
    pub fn samples(&self, coeffs: &[Complex64]) -> Vec<f64> {
        debug_assert_eq!(coeffs.len(), self.n);
        let mut buf = coeffs.to_vec();
        self.inv.process(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }

    /// In-place inverse transform (unnormalized; pairs with `coeffs`).
    pub fn samples_inplace(&self, buf: &mut [Complex64]) {
        debug_assert_eq!(buf.len(), self.n);
        self.inv.process(buf);
    }
}

/// Signed integer mode index of bin `j` in a length-`n` transform.
pub fn mode_index(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

/// Is bin `j` the unpaired Nyquist mode of an even-length transform?
pub fn is_nyquist(j: usize, n: usize) -> bool {
    n % 2 == 0 && j == n / 2
}

/// Apply `(i k)^order` to a coefficient vector, `k = 2 pi m / length`.
/// The Nyquist bin is zeroed (it carries no usable derivative phase).
pub fn derivative_coeffs(coeffs: &mut [Complex64], length: f64, order: u32) {
    let n = coeffs.len();
    let base = 2.0 * std::f64::consts::PI / length;
    for (j, c) in coeffs.iter_mut().enumerate() {
        if is_nyquist(j, n) {
            *c = Complex64::new(0.0, 0.0);
            continue;
        }
        let k = base * mode_index(j, n) as f64;
        *c *= Complex64::new(0.0, k).powi(order as i32);
    }
}

/// Zero all modes with `|m| > floor(n/3)` (the 2/3 dealiasing rule).
pub fn dealias_coeffs(coeffs: &mut [Complex64]) {
    let n = coeffs.len();
    let keep = (n / 3) as i64;
    for (j, c) in coeffs.iter_mut().enumerate() {
        if mode_index(j, n).abs() > keep {
            *c = Complex64::new(0.0, 0.0);
        }
    }
}

/// Zero-pad or truncate a coefficient vector to length `n_to`. When padding,
/// an unpaired Nyquist coefficient is split into a conjugate pair so real
/// signals stay real.
pub fn resample_coeffs(coeffs: &[Complex64], n_to: usize) -> Vec<Complex64> {
    let n_from = coeffs.len();
    let mut out = vec![Complex64::new(0.0, 0.0); n_to];
    for (j, &c) in coeffs.iter().enumerate() {
        let m = mode_index(j, n_from);
        if is_nyquist(j, n_from) {
            if n_to > n_from {
                let half = 0.5 * c;
                let jp = m.rem_euclid(n_to as i64) as usize;
                let jm = (-m).rem_euclid(n_to as i64) as usize;
                out[jp] += half;
                out[jm] += half.conj();
            } else if n_to == n_from {
                out[j] = c;
            }
            // truncation drops it
            continue;
        }
        // keep strictly resolvable modes of the target grid
        if 2 * (m.unsigned_abs() as usize) < n_to {
            let jt = m.rem_euclid(n_to as i64) as usize;
            out[jt] = c;
        }
    }
    out
}

/// Resample periodic samples onto `n_to` uniform nodes sharing the same
/// origin and period (spectral zero-padding / truncation).
pub fn resample_periodic(samples: &[f64], n_to: usize) -> Vec<f64> {
    let n_from = samples.len();
    if n_to == n_from {
        return samples.to_vec();
    }
    let coeffs = Transform::get(n_from).coeffs(samples);
    let out = resample_coeffs(&coeffs, n_to);
    Transform::get(n_to).samples(&out)
}

// ---------------------------------------------------------------------------
// Trigonometric interpolation at arbitrary points
// ---------------------------------------------------------------------------

/// Trigonometric interpolant of periodic samples; evaluates anywhere on the
/// (wrapped) line. `origin` is the coordinate of sample 0, `length` the
/// period.
pub struct TrigInterp {
    coeffs: Vec<Complex64>,
    origin: f64,
    length: f64,
}

impl TrigInterp {
    pub fn from_samples(samples: &[f64], origin: f64, length: f64) -> Self {
        let coeffs = Transform::get(samples.len()).coeffs(samples);
        TrigInterp {
            coeffs,
            origin,
            length,
        }
    }

    pub fn eval(&self, pos: f64) -> f64 {
        let theta = 2.0 * std::f64::consts::PI * (pos - self.origin) / self.length;
        eval_modes(&self.coeffs, theta)
    }
}

/// Evaluate `sum_m c_m exp(i m theta)` (real part), treating an unpaired
/// Nyquist coefficient as a cosine.
pub fn eval_modes(coeffs: &[Complex64], theta: f64) -> f64 {
    let n = coeffs.len();
    let mut acc = 0.0;
    for (j, &c) in coeffs.iter().enumerate() {
        let m = mode_index(j, n);
        let phase = Complex64::from_polar(1.0, m as f64 * theta);
        if is_nyquist(j, n) {
            acc += c.re * (m as f64 * theta).cos();
        } else {
            acc += (c * phase).re;
        }
    }
    acc
}

/// Per-mode phase factors for batch evaluation with [`eval_with_phases`].
pub fn mode_phases(n: usize, theta: f64) -> Vec<Complex64> {
    (0..n)
        .map(|j| {
            let m = mode_index(j, n);
            if is_nyquist(j, n) {
                Complex64::new((m as f64 * theta).cos(), 0.0)
            } else {
                Complex64::from_polar(1.0, m as f64 * theta)
            }
        })
        .collect()
}

pub fn eval_with_phases(coeffs: &[Complex64], phases: &[Complex64]) -> f64 {
    debug_assert_eq!(coeffs.len(), phases.len());
    coeffs
        .iter()
        .zip(phases)
        .map(|(c, p)| (c * p).re)
        .sum()
}

// ---------------------------------------------------------------------------
// 1D field operations
// ---------------------------------------------------------------------------

/// Spectral derivative on the unit torus.
pub fn ddx(f: &Field1D) -> Field1D {
    ddx_order(f, 1)
}

pub fn ddx_order(f: &Field1D, order: u32) -> Field1D {
    let t = Transform::get(f.len());
    let mut coeffs = t.coeffs(f.as_slice());
    derivative_coeffs(&mut coeffs, f.grid().length(), order);
    Field1D::derived(f.grid(), t.samples(&coeffs))
}

/// Rectangle-rule integral over the torus.
pub fn integrate_x(f: &Field1D) -> f64 {
    f.as_slice().iter().sum::<f64>() * f.grid().dx()
}

/// Mean over the torus (equals the integral: the domain has length 1).
pub fn mean_x(f: &Field1D) -> f64 {
    integrate_x(f)
}

/// Exact antiderivative of the trigonometric interpolant from `x = 0`:
/// `I(u)(x) = <u> x + sum_{m != 0} c_m / (i k_m) (exp(i k_m x) - 1)`.
pub fn antiderivative_from_zero(f: &Field1D) -> Field1D {
    let n = f.len();
    let t = Transform::get(n);
    let coeffs = t.coeffs(f.as_slice());
    let mean = coeffs[0].re;
    let base = 2.0 * std::f64::consts::PI / f.grid().length();
    let mut anti = vec![Complex64::new(0.0, 0.0); n];
    for (j, &c) in coeffs.iter().enumerate() {
        if j == 0 || is_nyquist(j, n) {
            // Nyquist antiderivative vanishes at the nodes
            continue;
        }
        let k = base * mode_index(j, n) as f64;
        anti[j] = c / Complex64::new(0.0, k);
    }
    let osc = t.samples(&anti);
    let osc0 = osc[0];
    let grid = f.grid();
    let data = (0..n)
        .map(|j| mean * grid.node(j) + osc[j] - osc0)
        .collect();
    Field1D::derived(grid, data)
}

/// L^p norms used by the diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lp {
    Two,
    Three,
    Four,
    Six,
    Inf,
}

impl Lp {
    fn exponent(self) -> Option<i32> {
        match self {
            Lp::Two => Some(2),
            Lp::Three => Some(3),
            Lp::Four => Some(4),
            Lp::Six => Some(6),
            Lp::Inf => None,
        }
    }
}

fn lp_of_samples(samples: &[f64], cell: f64, p: Lp) -> f64 {
    match p.exponent() {
        None => samples.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        Some(q) => {
            let sum: f64 = samples.iter().map(|&v| v.abs().powi(q)).sum();
            (sum * cell).powf(1.0 / q as f64)
        }
    }
}

pub fn norm_lp(f: &Field1D, p: Lp) -> f64 {
    lp_of_samples(f.as_slice(), f.grid().dx(), p)
}

pub fn norm_l2(f: &Field1D) -> f64 {
    norm_lp(f, Lp::Two)
}

/// Sobolev norm `( sum_{j<=k} ||d^j f/dx^j||^2_{L2} )^(1/2)` via Parseval.
pub fn norm_hk(f: &Field1D, k: usize) -> f64 {
    assert!(k <= 5, "norm_hk supports k <= 5");
    let n = f.len();
    let coeffs = Transform::get(n).coeffs(f.as_slice());
    let base = 2.0 * std::f64::consts::PI / f.grid().length();
    let mut total = 0.0;
    for (j, c) in coeffs.iter().enumerate() {
        let sq = c.norm_sqr();
        if is_nyquist(j, n) {
            // derivative factors are zeroed at the Nyquist bin
            total += sq;
            continue;
        }
        let k2 = (base * mode_index(j, n) as f64).powi(2);
        let mut weight = 1.0;
        let mut pow = 1.0;
        for _ in 0..k {
            pow *= k2;
            weight += pow;
        }
        total += weight * sq;
    }
    total.sqrt()
}

// ---------------------------------------------------------------------------
// 2D field operations
// ---------------------------------------------------------------------------

/// Forward FFT along x of every row; returns an `ny * nx` complex buffer in
/// the same row-major layout.
fn rows_to_coeffs(f: &Field2D) -> Vec<Complex64> {
    let nx = f.nx();
    let t = Transform::get(nx);
    let mut buf: Vec<Complex64> = f
        .as_slice()
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .collect();
    buf.par_chunks_mut(nx).for_each(|row| {
        t.coeffs_inplace(row);
    });
    buf
}

fn rows_to_samples(mut buf: Vec<Complex64>, nx: usize) -> Vec<f64> {
    let t = Transform::get(nx);
    buf.par_chunks_mut(nx).for_each(|row| {
        t.samples_inplace(row);
    });
    buf.into_iter().map(|c| c.re).collect()
}

/// x-derivative of a 2D field (spectral along each row).
pub fn ddx2(f: &Field2D, order: u32) -> Field2D {
    let nx = f.nx();
    let mut buf = rows_to_coeffs(f);
    let length = f.grid().x.length();
    buf.par_chunks_mut(nx).for_each(|row| {
        derivative_coeffs(row, length, order);
    });
    Field2D::derived(f.grid(), rows_to_samples(buf, nx))
}

/// y-derivative of a 2D field (spectral along each column).
pub fn ddy2(f: &Field2D, order: u32) -> Field2D {
    let nx = f.nx();
    let ny = f.ny();
    let length = f.grid().y.length();
    let t = Transform::get(ny);
    let src = f.as_slice();
    let mut out = vec![0.0; nx * ny];
    // gather column, transform, differentiate, scatter back
    let cols: Vec<Vec<f64>> = (0..nx)
        .into_par_iter()
        .map(|ix| {
            let mut col: Vec<Complex64> = (0..ny)
                .map(|iy| Complex64::new(src[iy * nx + ix], 0.0))
                .collect();
            t.coeffs_inplace(&mut col);
            derivative_coeffs(&mut col, length, order);
            t.samples(&col)
        })
        .collect();
    for (ix, col) in cols.iter().enumerate() {
        for (iy, &v) in col.iter().enumerate() {
            out[iy * nx + ix] = v;
        }
    }
    Field2D::derived(f.grid(), out)
}

pub fn ddx2d(f: &Field2D) -> Field2D {
    ddx2(f, 1)
}

pub fn ddy2d(f: &Field2D) -> Field2D {
    ddy2(f, 1)
}

pub fn integrate_xy(f: &Field2D) -> f64 {
    f.as_slice().iter().sum::<f64>() * f.grid().cell()
}

pub fn norm_lp_2d(f: &Field2D, p: Lp) -> f64 {
    lp_of_samples(f.as_slice(), f.grid().cell(), p)
}

pub fn norm_l2_2d(f: &Field2D) -> f64 {
    norm_lp_2d(f, Lp::Two)
}

/// Split into the x-average profile and the zero-x-mean part:
/// `f(x, y) = f_bar(y) + f_tilde(x, y)` with `int f_tilde dx = 0` per row.
pub fn split_mean(f: &Field2D) -> (Vec<f64>, Field2D) {
    let nx = f.nx();
    let ny = f.ny();
    let mut bar = Vec::with_capacity(ny);
    let mut tilde = vec![0.0; nx * ny];
    for iy in 0..ny {
        let row = f.row(iy);
        let mean = row.iter().sum::<f64>() / nx as f64;
        bar.push(mean);
        for ix in 0..nx {
            tilde[iy * nx + ix] = row[ix] - mean;
        }
    }
    (bar, Field2D::derived(f.grid(), tilde))
}

/// Squared L2 norm of the gradient, `int |df/dx|^2 + |df/dy|^2 dx dy`.
pub fn grad_norm_sq(f: &Field2D) -> f64 {
    let fx = ddx2d(f);
    let fy = ddy2d(f);
    integrate_xy(&fx.zip_with(&fx, |a, b| a * b)) + integrate_xy(&fy.zip_with(&fy, |a, b| a * b))
}

/// Validate that two 2D fields share a grid.
pub fn require_same_grid(a: &Field2D, b: &Field2D) -> Result<()> {
    if a.grid() != b.grid() {
        return Err(Error::mismatch("2D fields on different grids"));
    }
    Ok(())
}

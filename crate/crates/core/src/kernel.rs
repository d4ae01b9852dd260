//! One-step kernel: the transition density `f_h`, its moments, the
//! inverse-CDF sampler, the Gaussian weights and the well-posedness constants.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::linalg::{frobenius_dot, inverse, min_eigenvalue, pinv_symmetric, symmetrize, Matrix, Vector, RANK_RTOL};
use crate::model::{ControlProblem, PathGrid};

/// Tolerance for the sign conditions of the standing assumption.
const SIGN_TOL: f64 = 1e-10;

/// Per-step parameters of `f_h`: `a0 = σ₀σ₀ᵀ`, `a_u = σσᵀ − a0`, `b_u = μ`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDensityParams {
    pub a0: Matrix,
    pub a_u: Matrix,
    pub b_u: Vector,
    pub h: f64,
}

impl StepDensityParams {
    pub fn new(a0: Matrix, a_u: Matrix, b_u: Vector, h: f64) -> Self {
        Self { a0, a_u, b_u, h }
    }

    /// Builds the parameters from `σ`, `σ₀` and `μ` at one `(t, x, u)`.
    pub fn from_coefficients(sigma: &Matrix, sigma0: &Matrix, mu: &Vector, h: f64) -> Self {
        let a0 = symmetrize(&(sigma0 * sigma0.transpose()));
        let a_u = symmetrize(&(sigma * sigma.transpose())) - &a0;
        Self { a0, a_u, b_u: mu.clone(), h }
    }

    /// Scalar shorthand for `d = 1`.
    pub fn scalar(a0: f64, a_u: f64, b_u: f64, h: f64) -> Self {
        Self {
            a0: DMatrix::from_element(1, 1, a0),
            a_u: DMatrix::from_element(1, 1, a_u),
            b_u: Vector::from_element(1, b_u),
            h,
        }
    }

    pub fn dim(&self) -> usize {
        self.b_u.len()
    }

    /// `1 − ½ a_u · a0⁻¹`.
    pub fn constant_factor(&self) -> Result<f64> {
        let a0_inv = inverse(&self.a0, "a0")?;
        Ok(1.0 - 0.5 * frobenius_dot(&self.a_u, &a0_inv))
    }
}

/// `min_w ½ wᵀ a_u w + b_u · w`; `-∞` when `b_u` leaves the range of `a_u`.
pub fn step_mg(params: &StepDensityParams) -> f64 {
    let pinv = pinv_symmetric(&params.a_u, RANK_RTOL);
    let b = &params.b_u;
    let projected = &params.a_u * (&pinv * b);
    let residual = (b - projected).norm();
    if residual > 1e-8 * b.norm() {
        return f64::NEG_INFINITY;
    }
    let value = -0.5 * b.dot(&(&pinv * b));
    // exact zero rather than -0.0 keeps the m_G = 0 branch clean
    if value == 0.0 {
        0.0
    } else {
        value
    }
}

/// Minimum over `x` of the polynomial factor of `f_h`, which equals
/// `1 − ½ a_u·a0⁻¹ + h m` with `m` from [`step_mg`], and a point attaining it.
pub fn min_factor(params: &StepDensityParams) -> Result<(f64, Option<Vector>)> {
    let c0 = params.constant_factor()?;
    let m = step_mg(params);
    if m == f64::NEG_INFINITY {
        return Ok((f64::NEG_INFINITY, None));
    }
    // minimizer y = −h a_u⁺ b in a0⁻¹x coordinates
    let pinv = pinv_symmetric(&params.a_u, RANK_RTOL);
    let y = -(&pinv * &params.b_u) * params.h;
    let x = &params.a0 * y;
    Ok((c0 + params.h * m, Some(x)))
}

fn gaussian_density(a0h: &Matrix, x: &Vector) -> Result<f64> {
    let d = x.len();
    let inv = inverse(a0h, "h·a0")?;
    let det = if d == 1 { a0h[(0, 0)] } else { a0h.determinant() };
    if !(det > 0.0) {
        return Err(Error::Singular("h·a0"));
    }
    let q = x.dot(&(&inv * x));
    Ok((-0.5 * q).exp() / ((2.0 * PI).powi(d as i32) * det).sqrt())
}

/// `f_h` at `x`: the `N(0, h a0)` density times
/// `1 − ½ a_u·a0⁻¹ + b_u·a0⁻¹x + ½ h⁻¹ xᵀ a0⁻¹ a_u a0⁻¹ x`.
/// Negative values are returned as is when `h` exceeds `h0`.
pub fn density_eval(params: &StepDensityParams, x: &Vector) -> Result<f64> {
    let a0_inv = inverse(&params.a0, "a0")?;
    let y = &a0_inv * x;
    let factor = 1.0 - 0.5 * frobenius_dot(&params.a_u, &a0_inv)
        + params.b_u.dot(&y)
        + 0.5 / params.h * y.dot(&(&params.a_u * &y));
    Ok(gaussian_density(&(&params.a0 * params.h), x)? * factor)
}

/// Mean `b_u h` and covariance `(a_u + a0) h − b_u b_uᵀ h²`.
pub fn density_moments(params: &StepDensityParams) -> (Vector, Matrix) {
    let h = params.h;
    let mean = &params.b_u * h;
    let cov = (&params.a_u + &params.a0) * h - &params.b_u * params.b_u.transpose() * (h * h);
    (mean, cov)
}

fn std_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

fn std_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Number of CDF table points.
pub const TABLE_POINTS: usize = 4096;
/// Table half-width in standard deviations of `f_h`.
pub const TABLE_WIDTH: f64 = 8.0;

/// Inverse-CDF sampler for `f_h` in `d = 1`.
///
/// In units of `ξ = x / √(h a0)` the density is `φ(ξ)(α + βξ + γξ²)` with
/// `γ = c/2`, `α = 1 − γ`, `c = a_u/a0`, `β = b √h / √a0`, so the CDF is
/// `Φ(z) − (β + γz)φ(z)`. The table is only the starting point of a
/// Newton polish on that closed form.
#[derive(Clone, Debug)]
pub struct StepSampler {
    c: f64,
    beta: f64,
    scale: f64,
    grid: Vec<f64>,
    table: Vec<f64>,
}

impl StepSampler {
    pub fn new(params: &StepDensityParams) -> Result<Self> {
        if params.dim() != 1 {
            return Err(Error::DimensionUnsupported { dim: params.dim(), what: "f_h sampling" });
        }
        let a0 = params.a0[(0, 0)];
        if !(a0 > 0.0) || !(params.h > 0.0) {
            return Err(Error::Singular("a0"));
        }
        let c = params.a_u[(0, 0)] / a0;
        let beta = params.b_u[0] * params.h.sqrt() / a0.sqrt();
        Self::standardized(c, beta, (params.h * a0).sqrt())
    }

    /// Sampler for the standardized pair `(c, β)`, returning `scale·ξ`.
    pub fn standardized(c: f64, beta: f64, scale: f64) -> Result<Self> {
        let gamma = 0.5 * c;
        let alpha = 1.0 - gamma;
        // min of α + βξ + γξ² over ξ
        let min_factor = if gamma > 0.0 {
            alpha - beta * beta / (4.0 * gamma)
        } else if gamma == 0.0 && beta == 0.0 {
            alpha
        } else {
            f64::NEG_INFINITY
        };
        if min_factor < -1e-12 {
            return Err(Error::NegativeDensity { min_factor });
        }
        let mean = beta;
        let sd = (1.0 + c - beta * beta).max(1e-300).sqrt();
        let (lo, hi) = (mean - TABLE_WIDTH * sd, mean + TABLE_WIDTH * sd);
        let step = (hi - lo) / (TABLE_POINTS - 1) as f64;
        let grid: Vec<f64> = (0..TABLE_POINTS).map(|i| lo + step * i as f64).collect();
        let mut s = Self { c, beta, scale, grid, table: Vec::new() };
        let mut table: Vec<f64> = s.grid.iter().map(|&z| s.cdf_std(z)).collect();
        // enforce monotonicity against round-off in the far tails
        for i in 1..table.len() {
            if table[i] < table[i - 1] {
                table[i] = table[i - 1];
            }
        }
        s.table = table;
        Ok(s)
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn pdf_std(&self, z: f64) -> f64 {
        let gamma = 0.5 * self.c;
        std_pdf(z) * (1.0 - gamma + self.beta * z + gamma * z * z)
    }

    pub fn cdf_std(&self, z: f64) -> f64 {
        std_cdf(z) - (self.beta + 0.5 * self.c * z) * std_pdf(z)
    }

    /// CDF in `x` units.
    pub fn cdf(&self, x: f64) -> f64 {
        self.cdf_std(x / self.scale)
    }

    /// `F_h⁻¹(u)` in `x` units.
    pub fn quantile(&self, u: f64) -> f64 {
        self.scale * self.quantile_std(u)
    }

    fn quantile_std(&self, u: f64) -> f64 {
        let n = self.table.len();
        if u <= self.table[0] {
            return self.grid[0];
        }
        if u >= self.table[n - 1] {
            return self.grid[n - 1];
        }
        // first index with table[i] >= u
        let i = self.table.partition_point(|&v| v < u).max(1);
        let (mut lo, mut hi) = (self.grid[i - 1], self.grid[i]);
        let (f_lo, f_hi) = (self.table[i - 1], self.table[i]);
        let mut z = if f_hi > f_lo { lo + (u - f_lo) / (f_hi - f_lo) * (hi - lo) } else { 0.5 * (lo + hi) };
        for _ in 0..60 {
            let f = self.cdf_std(z) - u;
            if f.abs() <= 1e-15 {
                break;
            }
            if f > 0.0 {
                hi = z;
            } else {
                lo = z;
            }
            let p = self.pdf_std(z);
            let newton = z - f / p;
            z = if p > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if hi - lo < 1e-15 * (1.0 + z.abs()) {
                break;
            }
        }
        z
    }
}

/// `H_h(u01)`: one draw of `f_h` through its inverse CDF (`d = 1`).
pub fn sample_step(params: &StepDensityParams, u01: f64) -> Result<Vector> {
    let sampler = StepSampler::new(params)?;
    Ok(Vector::from_element(1, sampler.quantile(u01)))
}

/// Samplers shared across paths, keyed by the bits of `(c, β)`.
#[derive(Default)]
pub struct SamplerCache {
    inner: Mutex<HashMap<(u64, u64), Arc<StepSampler>>>,
}

impl SamplerCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, params: &StepDensityParams) -> Result<ScaledSampler> {
        if params.dim() != 1 {
            return Err(Error::DimensionUnsupported { dim: params.dim(), what: "f_h sampling" });
        }
        let a0 = params.a0[(0, 0)];
        let c = params.a_u[(0, 0)] / a0;
        let beta = params.b_u[0] * params.h.sqrt() / a0.sqrt();
        let scale = (params.h * a0).sqrt();
        // the table depends on (c, β) only; the scale is applied on output
        let key = (c.to_bits(), beta.to_bits());
        let base = {
            let map = self.inner.lock().unwrap_or_else(|e| e.into_inner());
            map.get(&key).cloned()
        };
        let base = match base {
            Some(s) => s,
            None => {
                let s = Arc::new(StepSampler::standardized(c, beta, 1.0)?);
                let mut map = self.inner.lock().unwrap_or_else(|e| e.into_inner());
                map.entry(key).or_insert(s).clone()
            }
        };
        Ok(ScaledSampler { base, scale })
    }
}

/// A shared standardized sampler with its own output scale.
#[derive(Clone, Debug)]
pub struct ScaledSampler {
    base: Arc<StepSampler>,
    scale: f64,
}

impl ScaledSampler {
    pub fn quantile(&self, u: f64) -> f64 {
        self.scale * self.base.quantile_std(u)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.base.cdf_std(x / self.scale)
    }
}

/// Multipliers whose products with `Y_{k+1}` give `E_k[Y]`, `Z_k`, `Γ_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianWeights {
    pub w_y: f64,
    pub w_z: Vector,
    pub w_gamma: Matrix,
}

/// `w_z = (σ₀ᵀ)⁻¹ ΔW / h` and `w_γ = (σ₀ᵀ)⁻¹ (ΔW ΔWᵀ − h I) / h² σ₀⁻¹`.
pub fn gaussian_weights(sigma0: &Matrix, dw: &Vector, h: f64) -> Result<GaussianWeights> {
    let inv = inverse(sigma0, "σ₀")?;
    let inv_t = inv.transpose();
    let d = dw.len();
    let w_z = &inv_t * dw / h;
    let inner = (dw * dw.transpose() - Matrix::identity(d, d) * h) / (h * h);
    let w_gamma = &inv_t * inner * &inv;
    Ok(GaussianWeights { w_y: 1.0, w_z, w_gamma })
}

/// Offending `(step, control)` tuple for the standing assumption.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub t_index: usize,
    pub control: usize,
    pub reason: String,
}

/// Per-control summary: the control's own `m_G` and `h0` contributions.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ControlDiagnostics {
    pub control: usize,
    pub m_g: f64,
    pub h0: f64,
    pub min_constant_factor: f64,
}

/// The constants `m_G` and `h0`, with the tuple attaining each.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WellPosedness {
    pub m_g: f64,
    pub h0: f64,
    pub horizon: f64,
    /// `(t_index, control)` attaining `m_G`.
    pub argmin: Option<(usize, usize)>,
    pub per_control: Vec<ControlDiagnostics>,
    pub violations: Vec<Violation>,
    /// Smallest `1 − ½ a_u·a0⁻¹` seen over the probes.
    pub min_constant_factor: f64,
    /// `m_G` is a min over probe states, not over the continuum.
    pub probe_estimate: bool,
}

impl WellPosedness {
    pub fn is_conforming(&self) -> bool {
        self.violations.is_empty()
    }

    /// Gate for a step size: assumption violations first, then `h ≤ h0`.
    pub fn check_step(&self, h: f64) -> Result<()> {
        if let Some(v) = self.violations.first() {
            return Err(Error::AssumptionViolation {
                t_index: v.t_index,
                control: v.control,
                reason: v.reason.clone(),
                count: self.violations.len(),
            });
        }
        if h > self.h0 * (1.0 + 1e-12) {
            return Err(Error::StepTooLarge { h, h0: self.h0 });
        }
        Ok(())
    }

    /// Replaces the probe estimate of `m_G` by a user-supplied analytic value.
    pub fn with_analytic_mg(mut self, m_g: f64) -> Self {
        self.m_g = m_g.min(0.0);
        self.h0 = h0_from(self.m_g, self.min_constant_factor, self.horizon);
        if !self.violations.is_empty() {
            self.h0 = 0.0;
        }
        self.probe_estimate = false;
        self
    }
}

fn h0_from(m_g: f64, constant_factor: f64, horizon: f64) -> f64 {
    if m_g == f64::NEG_INFINITY {
        0.0
    } else if m_g == 0.0 {
        horizon
    } else {
        (-constant_factor.max(0.0) / m_g).min(horizon)
    }
}

struct Accumulator {
    horizon: f64,
    m_g: f64,
    h0: f64,
    argmin: Option<(usize, usize)>,
    per_control: Vec<ControlDiagnostics>,
    violations: Vec<Violation>,
    min_constant: f64,
}

impl Accumulator {
    fn new(horizon: f64, controls: usize) -> Self {
        Self {
            horizon,
            m_g: 0.0,
            h0: horizon,
            argmin: None,
            per_control: (0..controls)
                .map(|j| ControlDiagnostics { control: j, m_g: 0.0, h0: horizon, min_constant_factor: f64::INFINITY })
                .collect(),
            violations: Vec::new(),
            min_constant: f64::INFINITY,
        }
    }

    fn push(&mut self, k: usize, j: usize, params: &StepDensityParams) -> Result<()> {
        let scale = params.a0.norm().max(f64::MIN_POSITIVE);
        let eig = min_eigenvalue(&params.a_u);
        if eig < -SIGN_TOL * scale {
            self.record(k, j, format!("a_u is not positive semidefinite (min eigenvalue {eig:.3e})"));
        }
        let cf = params.constant_factor()?;
        if cf < -SIGN_TOL {
            self.record(k, j, format!("1 − ½ a_u·a0⁻¹ = {cf:.6} < 0"));
        }
        self.min_constant = self.min_constant.min(cf);
        let m = step_mg(params);
        if m == f64::NEG_INFINITY {
            self.record(k, j, "drift outside the range of a_u (m_G = −∞)".into());
        }
        let bound = h0_from(m, cf, self.horizon);
        let diag = &mut self.per_control[j];
        diag.m_g = diag.m_g.min(m);
        diag.h0 = diag.h0.min(bound);
        diag.min_constant_factor = diag.min_constant_factor.min(cf);
        if m < self.m_g || (self.argmin.is_none() && m == self.m_g) {
            self.m_g = m;
            self.argmin = Some((k, j));
        }
        self.h0 = self.h0.min(bound);
        Ok(())
    }

    fn record(&mut self, t_index: usize, control: usize, reason: String) {
        self.violations.push(Violation { t_index, control, reason });
    }

    fn finish(mut self) -> WellPosedness {
        if !self.violations.is_empty() {
            self.h0 = 0.0;
        }
        if self.m_g == 0.0 && self.violations.is_empty() {
            self.h0 = self.horizon;
        }
        WellPosedness {
            m_g: self.m_g,
            h0: self.h0,
            horizon: self.horizon,
            argmin: self.argmin,
            per_control: self.per_control,
            violations: self.violations,
            min_constant_factor: self.min_constant,
            probe_estimate: true,
        }
    }
}

/// Computes `m_G` and `h0` as minima over probe paths × grid times × controls,
/// recording every tuple that breaks the standing assumption.
pub fn well_posedness_report(problem: &ControlProblem, probes: &[PathGrid]) -> Result<WellPosedness> {
    if probes.is_empty() {
        return Err(Error::Config("well-posedness needs at least one probe path".into()));
    }
    let mut acc = Accumulator::new(problem.horizon(), problem.controls().len());
    for path in probes {
        let h = path.h();
        for k in 0..path.filled_to().max(1).min(path.steps()) {
            let stopped = path.truncated(k);
            let t = path.time(k);
            let sigma0 = problem.ref_vol(t, &stopped);
            for (j, u) in problem.controls().iter().enumerate() {
                let sigma = problem.vol(t, &stopped, u);
                let mu = problem.drift(t, &stopped, u);
                let params = StepDensityParams::from_coefficients(&sigma, &sigma0, &mu, h);
                if params.a_u.iter().chain(params.b_u.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::Evaluation { what: "coefficients", control: j });
                }
                acc.push(k, j, &params)?;
            }
        }
    }
    Ok(acc.finish())
}

/// Like [`well_posedness_report`] but fails on the first assumption violation.
pub fn well_posedness(problem: &ControlProblem, probes: &[PathGrid]) -> Result<WellPosedness> {
    let wp = well_posedness_report(problem, probes)?;
    if let Some(v) = wp.violations.first() {
        return Err(Error::AssumptionViolation {
            t_index: v.t_index,
            control: v.control,
            reason: v.reason.clone(),
            count: wp.violations.len(),
        });
    }
    Ok(wp)
}

/// Euler paths of the reference process `X⁰_{k+1} = X⁰_k + σ₀ ΔW`, used as probes.
pub fn reference_probes(problem: &ControlProblem, n: usize, count: usize, seed: u64) -> Result<Vec<PathGrid>> {
    let d = problem.dim_x();
    let mut out = Vec::with_capacity(count.max(1));
    for m in 0..count.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(m as u64);
        let mut path = PathGrid::new(n, problem.horizon(), problem.x0())?;
        let sq = path.h().sqrt();
        // the first probe is the constant path at x0
        for k in 0..n {
            let sigma0 = problem.ref_vol(path.time(k), &path);
            let dw = Vector::from_iterator(d, (0..d).map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                if m == 0 { 0.0 } else { z * sq }
            }));
            let next = Vector::from_column_slice(path.current()) + sigma0 * dw;
            path.push(next.as_slice())?;
        }
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{diag, ControlGrid, ControlPoint};
    use crate::quad::GaussLegendre;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vector {
        Vector::from_column_slice(x)
    }

    fn integrate_1d(p: &StepDensityParams, f: impl Fn(f64) -> f64) -> f64 {
        let sd = (p.h * p.a0[(0, 0)]).sqrt();
        let breaks: Vec<f64> = (-14..=14).map(|i| i as f64 * sd).collect();
        GaussLegendre::new(20).integrate_pieces(&breaks, sd, |x| density_eval(p, &v(&[x])).unwrap() * f(x))
    }

    #[test]
    fn step_mg_examples() {
        let p = StepDensityParams::new(Matrix::identity(2, 2), Matrix::identity(2, 2), v(&[1.0, 0.0]), 0.1);
        assert!((step_mg(&p) + 0.5).abs() < 1e-14);
        let p = StepDensityParams::new(Matrix::identity(2, 2), Matrix::zeros(2, 2), v(&[0.0, 0.0]), 0.1);
        assert_eq!(step_mg(&p), 0.0);
        let p = StepDensityParams::new(Matrix::identity(2, 2), diag(&[1.0, 0.0]), v(&[0.0, 1.0]), 0.1);
        assert_eq!(step_mg(&p), f64::NEG_INFINITY);
    }

    fn scalar_problem(a_u: f64, b: f64, horizon: f64) -> ControlProblem {
        let s = (1.0 + a_u).sqrt();
        ControlProblem::builder(horizon, vec![0.0], ControlGrid::singleton(ControlPoint::scalar(0.0)))
            .drift(move |_, _, _| v(&[b]))
            .vol(move |_, _, _| diag(&[s]))
            .ref_vol(|_, _| diag(&[1.0]))
            .terminal_reward(|p| p.current()[0])
            .build()
            .unwrap()
    }

    #[test]
    fn well_posedness_examples() {
        let trivial = scalar_problem(0.0, 0.0, 2.0);
        let probes = reference_probes(&trivial, 4, 3, 1).unwrap();
        let wp = well_posedness(&trivial, &probes).unwrap();
        assert_eq!(wp.m_g, 0.0);
        assert_eq!(wp.h0, 2.0);

        for horizon in [0.5, 3.0] {
            let p = scalar_problem(1.0, 1.0, horizon);
            let probes = reference_probes(&p, 4, 3, 1).unwrap();
            let wp = well_posedness(&p, &probes).unwrap();
            assert!((wp.m_g + 0.5).abs() < 1e-12);
            assert!((wp.h0 - horizon.min(1.0)).abs() < 1e-12);
        }

        let bad = scalar_problem(3.0, 0.0, 1.0);
        let probes = reference_probes(&bad, 4, 2, 1).unwrap();
        match well_posedness(&bad, &probes) {
            Err(Error::AssumptionViolation { reason, .. }) => assert!(reason.contains("< 0")),
            other => panic!("expected violation, got {other:?}"),
        }
        let report = well_posedness_report(&bad, &probes).unwrap();
        assert_eq!(report.h0, 0.0);
        assert!(report.check_step(0.1).unwrap_err().is_gate());
    }

    #[test]
    fn refining_controls_lowers_constants() {
        let build = |grid: ControlGrid| {
            ControlProblem::builder(1.0, vec![0.0], grid)
                .drift(|_, _, u| v(&[u.value()]))
                .vol(|_, _, _| diag(&[1.5f64.sqrt()]))
                .ref_vol(|_, _| diag(&[1.0]))
                .terminal_reward(|_| 0.0)
                .build()
                .unwrap()
        };
        let coarse = build(ControlGrid::linspace(-0.5, 0.5, 2).unwrap());
        let fine = build(ControlGrid::linspace(-1.0, 1.0, 5).unwrap());
        let probes = reference_probes(&coarse, 4, 2, 3).unwrap();
        let a = well_posedness(&coarse, &probes).unwrap();
        let b = well_posedness(&fine, &probes).unwrap();
        assert!(b.m_g <= a.m_g && b.h0 <= a.h0);
    }

    #[test]
    fn density_examples() {
        let p = StepDensityParams::scalar(1.0, 0.0, 0.0, 0.3);
        for x in [-1.0, 0.0, 0.7] {
            let expected = (-x * x / 0.6f64).exp() / (2.0 * PI * 0.3f64).sqrt();
            assert!((density_eval(&p, &v(&[x])).unwrap() - expected).abs() < 1e-15);
        }
        let p = StepDensityParams::scalar(1.0, 1.0, 0.0, 0.1);
        let phi = 1.0 / (2.0 * PI * 0.1f64).sqrt();
        assert!((density_eval(&p, &v(&[0.0])).unwrap() - 0.5 * phi).abs() < 1e-14);
        assert!((integrate_1d(&p, |_| 1.0) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn negative_beyond_h0() {
        let p = StepDensityParams::scalar(1.0, 1.0, 1.0, 1.0);
        // m_G = -1/2, 1 - c/2 = 1/2, h0 = 1
        let (f, x) = min_factor(&p).unwrap();
        assert!(f.abs() < 1e-14);
        let p2 = StepDensityParams { h: 2.0, ..p };
        let (f2, x2) = min_factor(&p2).unwrap();
        assert!(f2 < 0.0);
        assert!(density_eval(&p2, &x2.unwrap()).unwrap() < 0.0);
        assert!(x.is_some());
        assert!(matches!(StepSampler::new(&p2), Err(Error::NegativeDensity { .. })));
    }

    #[test]
    fn moments_examples() {
        let (m, c) = density_moments(&StepDensityParams::scalar(1.0, 1.0, 1.0, 0.1));
        assert!((m[0] - 0.1).abs() < 1e-15);
        assert!((c[(0, 0)] - 0.19).abs() < 1e-15);
        let (m, c) = density_moments(&StepDensityParams::scalar(2.0, 0.0, 0.0, 0.5));
        assert_eq!(m[0], 0.0);
        assert_eq!(c[(0, 0)], 1.0);
    }

    #[test]
    fn sampler_median_and_dimension() {
        let p = StepDensityParams::scalar(1.0, 0.0, 0.0, 0.2);
        assert!(sample_step(&p, 0.5).unwrap()[0].abs() < 1e-12);
        let p2 = StepDensityParams::new(Matrix::identity(2, 2), Matrix::zeros(2, 2), v(&[0.0, 0.0]), 0.2);
        assert!(matches!(sample_step(&p2, 0.5), Err(Error::DimensionUnsupported { dim: 2, .. })));
    }

    #[test]
    fn sampler_inverts_cdf() {
        let p = StepDensityParams::scalar(0.5, 0.4, 0.8, 0.25);
        let s = StepSampler::new(&p).unwrap();
        for u in [1e-6, 0.01, 0.3, 0.5, 0.77, 0.999] {
            let x = s.quantile(u);
            assert!((s.cdf(x) - u).abs() < 1e-12, "u={u}");
        }
        let cache = SamplerCache::new();
        let a = cache.get(&p).unwrap();
        assert_eq!(a.quantile(0.3), s.quantile(0.3));
    }

    #[test]
    fn gaussian_weight_examples() {
        let w = gaussian_weights(&Matrix::identity(2, 2), &v(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(w.w_y, 1.0);
        assert_eq!(w.w_z, v(&[0.0, 0.0]));
        assert_eq!(w.w_gamma, -Matrix::identity(2, 2));
        let w = gaussian_weights(&diag(&[2.0]), &v(&[0.3]), 0.1).unwrap();
        assert!((w.w_z[0] - 1.5).abs() < 1e-14);
        assert!((w.w_gamma[(0, 0)] + 0.25).abs() < 1e-14);
        assert!(gaussian_weights(&Matrix::zeros(1, 1), &v(&[0.3]), 0.1).is_err());
    }

    #[test]
    fn weights_have_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, m) = (0.1f64, 1_000_000);
        let s0 = diag(&[0.7]);
        let (mut sz, mut sz2, mut sg, mut sg2) = (0.0, 0.0, 0.0, 0.0);
        for _ in 0..m {
            let z: f64 = StandardNormal.sample(&mut rng);
            let w = gaussian_weights(&s0, &v(&[z * h.sqrt()]), h).unwrap();
            sz += w.w_z[0];
            sz2 += w.w_z[0] * w.w_z[0];
            sg += w.w_gamma[(0, 0)];
            sg2 += w.w_gamma[(0, 0)].powi(2);
        }
        let mf = m as f64;
        for (s, s2) in [(sz, sz2), (sg, sg2)] {
            let mean = s / mf;
            let se = ((s2 / mf - mean * mean) / mf).sqrt();
            assert!(mean.abs() < 4.0 * se, "mean {mean} se {se}");
        }
    }

    fn valid_params() -> impl Strategy<Value = StepDensityParams> {
        (0.2f64..3.0, 0.0f64..1.9, -1.5f64..1.5, 0.01f64..1.0).prop_filter_map("h ≤ h0", |(a0, c, b, h)| {
            let p = StepDensityParams::scalar(a0, c * a0, b, h);
            let (f, _) = min_factor(&p).ok()?;
            (f >= 0.0).then_some(p)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn density_integrates_to_one_and_matches_moments(p in valid_params()) {
            let mass = integrate_1d(&p, |_| 1.0);
            prop_assert!((mass - 1.0).abs() < 1e-8);
            let (mean, cov) = density_moments(&p);
            let m1 = integrate_1d(&p, |x| x);
            let m2 = integrate_1d(&p, |x| (x - mean[0]).powi(2));
            prop_assert!((m1 - mean[0]).abs() < 1e-9);
            prop_assert!((m2 - cov[(0, 0)]).abs() < 1e-9);
            prop_assert!(cov[(0, 0)] > 0.0);
        }

        #[test]
        fn density_nonnegative_below_h0(p in valid_params(), z in -10.0f64..10.0) {
            let x = z * (p.h * p.a0[(0, 0)]).sqrt();
            prop_assert!(density_eval(&p, &v(&[x])).unwrap() >= -1e-12);
        }

        #[test]
        fn mg_closed_form_matches_brute_min(a in 0.01f64..2.0, b in -2.0f64..2.0) {
            let p = StepDensityParams::scalar(1.0, a, b, 0.1);
            let brute = (-4000..=4000)
                .map(|i| i as f64 * 0.01 * (1.0 + b.abs() / a))
                .map(|w| 0.5 * a * w * w + b * w)
                .fold(f64::INFINITY, f64::min);
            prop_assert!(step_mg(&p) <= brute + 1e-12);
            prop_assert!(brute - step_mg(&p) < 1e-3 * (1.0 + step_mg(&p).abs()));
        }
    }
}

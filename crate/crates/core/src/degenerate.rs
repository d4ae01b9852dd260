//! Perturbation of a degenerate diffusion, `σ^ε = (σσᵀ + ε²I)^{1/2}`, and the
//! ε-sweep that reports the perturbation bias as a difference table.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernel::{reference_probes, well_posedness, WellPosedness};
use crate::linalg::{sqrt_psd, Matrix};
use crate::model::{ControlProblem, LiftSpec, MarkovLift, PathGrid};
use crate::scheme::{backward_induction, SchemeConfig};

/// Eigenvalues of `σσᵀ + ε²I` this far below zero are clamped.
pub const CLAMP_TOL: f64 = 1e-12;

/// `(σσᵀ + ε²I)^{1/2}`, the symmetric square root.
pub fn perturbed_vol(sigma: &Matrix, epsilon: f64) -> Result<Matrix> {
    let d = sigma.nrows();
    sqrt_psd(&(sigma * sigma.transpose() + Matrix::identity(d, d) * (epsilon * epsilon)), CLAMP_TOL)
}

/// A reference volatility as a function of `(t, x, s)`, with its eigenvalue floor.
#[derive(Clone)]
pub struct RefVol {
    pub f: Arc<dyn Fn(f64, &[f64], &[f64]) -> Matrix + Send + Sync>,
    /// Lower bound on the eigenvalues of `σ₀σ₀ᵀ`.
    pub eps0: f64,
}

impl RefVol {
    /// `σ₀ = ε I`.
    pub fn scaled_identity(d: usize, epsilon: f64) -> Self {
        Self { f: Arc::new(move |_, _, _| Matrix::identity(d, d) * epsilon), eps0: epsilon * epsilon }
    }

    /// A constant matrix.
    pub fn constant(m: Matrix) -> Self {
        let eps0 = crate::linalg::min_eigenvalue(&(&m * m.transpose())) * (1.0 - 1e-9);
        Self { f: Arc::new(move |_, _, _| m.clone()), eps0 }
    }
}

pub struct PerturbedProblem {
    pub base: MarkovLift,
    pub epsilon: f64,
    pub lift: MarkovLift,
    /// Constants of the perturbed problem on reference probes.
    pub well_posedness: WellPosedness,
}

/// Probe resolution used when re-checking the perturbed problem.
const CHECK_STEPS: usize = 16;
const CHECK_PATHS: usize = 16;

/// Perturbs with `σ₀ = ε I`.
pub fn perturb(lift: &MarkovLift, epsilon: f64) -> Result<PerturbedProblem> {
    perturb_with_ref(lift, epsilon, RefVol::scaled_identity(lift.dim_x(), epsilon))
}

/// Perturbs the volatility and installs `ref_vol`, then re-checks the
/// standing assumption on reference probes. A violation, or `h0 = 0`, is an
/// error here rather than at solve time.
pub fn perturb_with_ref(lift: &MarkovLift, epsilon: f64, ref_vol: RefVol) -> Result<PerturbedProblem> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Config(format!("perturbation epsilon must be positive, got {epsilon}")));
    }
    let spec = lift.spec();
    let lifted_vol = spec.vol.clone();
    let vol_eps: crate::model::LiftedMatFn = Arc::new(move |t, x, s, u| {
        let sigma = lifted_vol(t, x, s, u);
        perturbed_vol(&sigma, epsilon).unwrap_or_else(|_| Matrix::from_element(sigma.nrows(), sigma.nrows(), f64::NAN))
    });
    let rf = ref_vol.f.clone();
    let new_spec = LiftSpec { vol: vol_eps, ref_vol: Arc::new(move |t, x, s| rf(t, x, s)), ..spec.clone() };

    let companion = Arc::new(new_spec.clone());
    let path_state = move |t: f64, path: &PathGrid| -> (Vec<f64>, Vec<f64>) {
        // replay the companion update along the recorded nodes
        let mut s = companion.s0.clone();
        for k in 1..=path.filled_to() {
            s = (companion.update)(&s, path.node(k), path.h());
        }
        (path.eval(t), s)
    };
    let ps = path_state.clone();
    let lv = new_spec.vol.clone();
    let rf = ref_vol.f.clone();
    let problem: ControlProblem = lift
        .problem()
        .with_vol(Arc::new(move |t, path, u| {
            let (x, s) = ps(t, path);
            lv(t, &x, &s, u)
        }))
        .with_ref_vol(
            Arc::new(move |t, path| {
                let (x, s) = path_state(t, path);
                rf(t, &x, &s)
            }),
            ref_vol.eps0,
        );
    let perturbed = MarkovLift::rebuild(problem, new_spec);
    let probes = reference_probes(perturbed.problem(), CHECK_STEPS, CHECK_PATHS, 0x5eed_e951)?;
    perturbed.problem().check_on(&probes)?;
    let wp = well_posedness(perturbed.problem(), &probes)?;
    if !(wp.h0 > 0.0) {
        return Err(Error::AssumptionViolation {
            t_index: wp.argmin.map(|a| a.0).unwrap_or(0),
            control: wp.argmin.map(|a| a.1).unwrap_or(0),
            reason: "h0 collapses to 0 after perturbation".into(),
            count: 1,
        });
    }
    Ok(PerturbedProblem { base: lift.clone(), epsilon, lift: perturbed, well_posedness: wp })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub y0: f64,
    pub stderr: f64,
    pub m_g: f64,
    pub h0: f64,
    pub conforming: bool,
}

/// Successive difference `Y(ε_{i+1}) − Y(ε_i)` and its ratio to `Δε`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepDifference {
    pub eps_lo: f64,
    pub eps_hi: f64,
    pub dy: f64,
    pub ratio: f64,
}

/// `Y(ε)` over the sweep, the difference table and the least-squares line
/// `Y ≈ intercept + slope · ε`. The slope estimates the bias constant; it is
/// empirical and no absolute bound is implied.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub differences: Vec<SweepDifference>,
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
}

/// Least-squares line through `(x, y)`: `(intercept, slope, R²)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (my - slope * mx, slope, r2)
}

/// Solves the perturbed problem for every `ε` with the same seed, so the
/// Brownian increments are shared across the sweep.
pub fn epsilon_sweep(
    lift: &MarkovLift,
    epsilons: &[f64],
    config: &SchemeConfig,
    ref_vol: &dyn Fn(f64) -> RefVol,
) -> Result<SweepReport> {
    if epsilons.len() < 2 {
        return Err(Error::Config("an ε-sweep needs at least two values".into()));
    }
    let mut eps = epsilons.to_vec();
    eps.sort_by(|a, b| a.total_cmp(b));
    let mut rows = Vec::with_capacity(eps.len());
    for &e in &eps {
        let p = perturb_with_ref(lift, e, ref_vol(e))?;
        let r = backward_induction(&p.lift, config)?;
        rows.push(SweepRow {
            epsilon: e,
            y0: r.y0,
            stderr: r.stderr,
            m_g: r.well_posedness.m_g,
            h0: r.well_posedness.h0,
            conforming: r.conforming,
        });
    }
    let differences = rows
        .windows(2)
        .map(|w| {
            let (dy, de) = (w[1].y0 - w[0].y0, w[1].epsilon - w[0].epsilon);
            SweepDifference { eps_lo: w[0].epsilon, eps_hi: w[1].epsilon, dy, ratio: dy / de }
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.y0).collect();
    let (intercept, slope, r_squared) = linear_fit(&xs, &ys);
    Ok(SweepReport { rows, differences, intercept, slope, r_squared })
}

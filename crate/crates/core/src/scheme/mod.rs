//! The backward scheme `Y_k = E_k[Y_{k+1}] + h G(t_k, ·, Γ_k, Z_k)` with
//! `Y_n = Φ̄`, driven by a quadrature engine or by regression.

mod ensemble;
pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{reference_probes, well_posedness_report, WellPosedness};
use crate::linalg::{frobenius_dot, symmetrize, Matrix, Vector};
use crate::model::{ControlPoint, MarkovLift};
use crate::regression::{self, RegressionConfig, StepFit};

pub use ensemble::{simulate_reference, Ensemble};
pub use oracle::{LatticeSurface, OracleConfig};

/// Arguments of the lifted driver `Ḡ(t_k, x, s, γ, p)`.
#[derive(Clone, Copy, Debug)]
pub struct DriverInput<'a> {
    pub t_index: usize,
    pub x: &'a [f64],
    pub s: &'a [f64],
    pub gamma: &'a Matrix,
    pub z: &'a Vector,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DriverValue {
    pub value: f64,
    /// Index into the control grid; ties go to the first index.
    pub argmax: usize,
}

impl DriverValue {
    pub fn control<'a>(&self, lift: &'a MarkovLift) -> &'a ControlPoint {
        lift.controls().get(self.argmax)
    }
}

/// `max_u [L + ½ a_u·γ + b_u·z]` over the control grid, with
/// `a_u = σσᵀ − σ₀σ₀ᵀ` and `b_u = μ` at `(t_k, x, s)`.
pub fn driver_g(lift: &MarkovLift, h: f64, input: &DriverInput<'_>) -> Result<DriverValue> {
    let t = input.t_index as f64 * h;
    let (x, s) = (input.x, input.s);
    let sigma0 = lift.ref_vol(t, x, s);
    let a0 = &sigma0 * sigma0.transpose();
    let gamma = symmetrize(input.gamma);
    let mut best = DriverValue { value: f64::NEG_INFINITY, argmax: 0 };
    for (j, u) in lift.controls().iter().enumerate() {
        let sigma = lift.vol(t, x, s, u);
        let a_u = &sigma * sigma.transpose() - &a0;
        let b = lift.drift(t, x, s, u);
        let l = lift.running_reward(t, x, s, u);
        let v = l + 0.5 * frobenius_dot(&a_u, &gamma) + b.dot(input.z);
        if v.is_nan() {
            return Err(Error::Evaluation { what: "driver", control: j });
        }
        if v > best.value {
            best = DriverValue { value: v, argmax: j };
        }
    }
    Ok(best)
}

/// How the conditional expectations are computed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Engine {
    Oracle(OracleConfig),
    Regression(RegressionConfig),
}

impl Engine {
    pub fn oracle() -> Self {
        Engine::Oracle(OracleConfig::default())
    }

    pub fn regression(scheme: regression::ProjectionScheme) -> Self {
        Engine::Regression(RegressionConfig { scheme, ..RegressionConfig::default() })
    }

    pub fn label(&self) -> &'static str {
        match self {
            Engine::Oracle(_) => "oracle",
            Engine::Regression(c) => match c.scheme {
                regression::ProjectionScheme::One => "regress1",
                regression::ProjectionScheme::Two => "regress2",
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeConfig {
    pub n: usize,
    /// Monte Carlo size `M` (regression engine only).
    pub paths: usize,
    pub seed: u64,
    pub engine: Engine,
    /// Run even when `h > h0` or the standing assumption fails; the result
    /// is then marked non-conforming.
    pub allow_h_override: bool,
    /// Reference paths on which `m_G` and `h0` are estimated.
    pub probe_paths: usize,
    /// Analytic `m_G` replacing the probe estimate.
    pub analytic_mg: Option<f64>,
    pub bootstrap: usize,
}

impl SchemeConfig {
    pub fn new(n: usize, engine: Engine) -> Self {
        Self {
            n,
            paths: 10_000,
            seed: 0,
            engine,
            allow_h_override: false,
            probe_paths: 16,
            analytic_mg: None,
            bootstrap: 200,
        }
    }

    pub fn h(&self, horizon: f64) -> f64 {
        horizon / self.n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub k: usize,
    pub argmax_counts: Vec<u64>,
    pub residual_y: Option<f64>,
    pub condition: Option<f64>,
    pub ridge: bool,
    pub truncation_hits: usize,
}

/// Per-step regression fits.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegressionSurface {
    pub dim_x: usize,
    pub fits: Vec<StepFit>,
}

/// What the scheme learned about `(Y, Z, Γ)` as functions of the lifted state.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum ValueSurface {
    Lattice(LatticeSurface),
    Regression(RegressionSurface),
}

impl ValueSurface {
    /// `(Z_k, Γ_k)` at the lifted state `(x, s)`.
    pub fn derivatives(&self, k: usize, x: &[f64], s: &[f64]) -> (Vector, Matrix) {
        match self {
            ValueSurface::Lattice(l) => {
                let (z, g) = l.derivatives(k, x[0], s.first().copied().unwrap_or(0.0));
                (Vector::from_element(1, z), Matrix::from_element(1, 1, g))
            }
            ValueSurface::Regression(r) => {
                let state: Vec<f64> = x.iter().chain(s).cloned().collect();
                r.fits[k].z_gamma(&state, r.dim_x)
            }
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            ValueSurface::Lattice(l) => l.steps.len(),
            ValueSurface::Regression(r) => r.fits.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SchemeResult {
    pub y0: f64,
    /// Bootstrap standard error; zero for the quadrature engine.
    pub stderr: f64,
    pub n: usize,
    pub h: f64,
    pub paths: usize,
    pub seed: u64,
    pub engine: String,
    pub well_posedness: WellPosedness,
    /// False when the run needed the step-size override.
    pub conforming: bool,
    pub argmax_counts: Vec<u64>,
    pub truncation_hits: usize,
    pub steps: Vec<StepDiagnostics>,
    pub surface: ValueSurface,
}

impl SchemeResult {
    /// Share of driver evaluations won by each control.
    pub fn argmax_frequencies(&self) -> Vec<f64> {
        let total: u64 = self.argmax_counts.iter().sum();
        self.argmax_counts.iter().map(|&c| c as f64 / total.max(1) as f64).collect()
    }
}

/// Estimates `m_G`, `h0` on reference probes and applies the step-size gate.
/// Returns the constants and whether the run is conforming.
pub fn gate(lift: &MarkovLift, config: &SchemeConfig) -> Result<(WellPosedness, bool)> {
    let probes = reference_probes(lift.problem(), config.n, config.probe_paths.max(1), config.seed ^ 0x0b5e)?;
    let mut wp = well_posedness_report(lift.problem(), &probes)?;
    if let Some(mg) = config.analytic_mg {
        wp = wp.with_analytic_mg(mg);
    }
    let h = config.h(lift.horizon());
    match wp.check_step(h) {
        Ok(()) => Ok((wp, true)),
        Err(_) if config.allow_h_override => Ok((wp, false)),
        Err(e) => Err(e),
    }
}

/// Runs the scheme: gate, then backward induction with the chosen engine.
pub fn backward_induction(lift: &MarkovLift, config: &SchemeConfig) -> Result<SchemeResult> {
    if config.n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    let (wp, conforming) = gate(lift, config)?;
    let h = config.h(lift.horizon());
    let controls = lift.controls().len();
    match &config.engine {
        Engine::Oracle(oc) => {
            let run = oracle::solve(lift, config.n, oc, config.seed)?;
            let steps: Vec<StepDiagnostics> = run
                .surface
                .steps
                .iter()
                .map(|st| {
                    let mut counts = vec![0u64; controls];
                    for &a in &st.argmax {
                        counts[a] += 1;
                    }
                    StepDiagnostics { k: st.k, argmax_counts: counts, residual_y: None, condition: None, ridge: false, truncation_hits: 0 }
                })
                .collect();
            Ok(SchemeResult {
                y0: run.y0,
                stderr: 0.0,
                n: config.n,
                h,
                paths: 0,
                seed: config.seed,
                engine: config.engine.label().into(),
                well_posedness: wp,
                conforming,
                argmax_counts: total_counts(&steps, controls),
                truncation_hits: 0,
                steps,
                surface: ValueSurface::Lattice(run.surface),
            })
        }
        Engine::Regression(rc) => {
            let ensemble = simulate_reference(lift, config.n, config.paths, config.seed)?;
            let run = regression::solve(lift, &ensemble, rc)?;
            let stderr = bootstrap_stderr(&run.path_values, config.bootstrap, config.seed);
            let steps: Vec<StepDiagnostics> = run
                .fits
                .iter()
                .map(|f| StepDiagnostics {
                    k: f.k,
                    argmax_counts: f.argmax_counts.clone(),
                    residual_y: Some(f.residual_y),
                    condition: Some(f.condition),
                    ridge: f.ridge,
                    truncation_hits: f.truncation_hits,
                })
                .collect();
            Ok(SchemeResult {
                y0: run.y0,
                stderr,
                n: config.n,
                h,
                paths: config.paths,
                seed: config.seed,
                engine: config.engine.label().into(),
                well_posedness: wp,
                conforming,
                argmax_counts: total_counts(&steps, controls),
                truncation_hits: steps.iter().map(|s| s.truncation_hits).sum(),
                steps,
                surface: ValueSurface::Regression(RegressionSurface { dim_x: lift.dim_x(), fits: run.fits }),
            })
        }
    }
}

fn total_counts(steps: &[StepDiagnostics], controls: usize) -> Vec<u64> {
    let mut out = vec![0u64; controls];
    for s in steps {
        for (o, c) in out.iter_mut().zip(&s.argmax_counts) {
            *o += c;
        }
    }
    out
}

/// Standard deviation of the mean over `resamples` bootstrap resamples.
pub fn bootstrap_stderr(values: &[f64], resamples: usize, seed: u64) -> f64 {
    let m = values.len();
    if m < 2 || resamples < 2 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb007_5742);
    let means: Vec<f64> = (0..resamples)
        .map(|_| (0..m).map(|_| values[rng.random_range(0..m)]).sum::<f64>() / m as f64)
        .collect();
    let mu = means.iter().sum::<f64>() / resamples as f64;
    (means.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (resamples - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{diag, ControlGrid};
    use crate::problems::{linear_martingale, markov_problem, MarkovCoefficients};
    use proptest::prelude::*;
    use std::sync::Arc;

    /// `dX = √u dW` with `σ₀ = √a0` and payoff `Φ`.
    fn variance_lift(grid: &[f64], a0: f64, payoff: fn(f64) -> f64) -> MarkovLift {
        markov_problem(MarkovCoefficients {
            horizon: 1.0,
            x0: vec![0.0],
            controls: ControlGrid::new(grid.iter().map(|&v| ControlPoint::scalar(v)).collect()).unwrap(),
            drift: Arc::new(|_, _, _| Vector::zeros(1)),
            vol: Arc::new(|_, _, u| diag(&[u.value().sqrt()])),
            running_reward: Arc::new(|_, _, _| 0.0),
            terminal_reward: Arc::new(move |x| payoff(x[0])),
            ref_vol: Arc::new(move |_, _| diag(&[a0.sqrt()])),
            eps0: a0,
            hint: None,
        })
        .unwrap()
    }

    fn driver_at(lift: &MarkovLift, gamma: f64) -> DriverValue {
        let g = Matrix::from_element(1, 1, gamma);
        let z = Vector::zeros(1);
        driver_g(lift, 0.1, &DriverInput { t_index: 0, x: &[0.0], s: &[], gamma: &g, z: &z }).unwrap()
    }

    #[test]
    fn driver_examples() {
        let single = variance_lift(&[0.04], 0.04, |x| x);
        let v = driver_at(&single, 3.0);
        assert_eq!((v.value, v.argmax), (0.0, 0));

        let pair = variance_lift(&[0.04, 0.09], 0.04, |x| x);
        let up = driver_at(&pair, 2.0);
        assert!((up.value - 0.5 * (0.09 - 0.04) * 2.0).abs() < 1e-15);
        assert_eq!(up.argmax, 1);
        assert_eq!(driver_at(&pair, -2.0).argmax, 0);
        // a tie goes to the first index
        assert_eq!(driver_at(&pair, 0.0).argmax, 0);
    }

    #[test]
    fn reference_ensemble_moments_and_determinism() {
        let lift = linear_martingale(1.0, 1.0, 1.0).unwrap();
        let a = simulate_reference(&lift, 8, 20_000, 11).unwrap();
        let m = a.paths() as f64;
        let xs: Vec<f64> = (0..a.paths()).map(|i| a.x(8, i)[0]).collect();
        let mean = xs.iter().sum::<f64>() / m;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0);
        assert!((mean - 1.0).abs() < 4.0 / m.sqrt());
        assert!((var - 1.0).abs() < 4.0 * (2.0 / m).sqrt());
        assert_eq!(a, simulate_reference(&lift, 8, 20_000, 11).unwrap());
        assert_ne!(a, simulate_reference(&lift, 8, 20_000, 12).unwrap());
    }

    #[test]
    fn singleton_martingale_is_exact() {
        let lift = linear_martingale(0.7, 0.5, 2.0).unwrap();
        for n in [1, 4, 13] {
            let r = backward_induction(&lift, &SchemeConfig::new(n, Engine::oracle())).unwrap();
            assert!((r.y0 - 0.7).abs() < 1e-10, "n = {n}: {}", r.y0);
        }
    }

    #[test]
    fn larger_control_sets_never_lower_the_value() {
        let payoff: fn(f64) -> f64 = |x| (x + 0.3).max(0.0) - 2.0 * (x - 0.2).max(0.0);
        let y = |grid: &[f64]| {
            backward_induction(&variance_lift(grid, 0.04, payoff), &SchemeConfig::new(16, Engine::oracle())).unwrap().y0
        };
        let (one, two, three) = (y(&[0.04]), y(&[0.04, 0.08]), y(&[0.04, 0.06, 0.08]));
        assert!(two >= one - 1e-12 && three >= two - 1e-12, "{one} {two} {three}");
        assert!(three > one + 1e-4);
    }

    #[test]
    fn override_marks_the_run() {
        // a_u = 0.16 − 0.04 gives 1 − ½ a_u/a0 = −0.5
        let lift = variance_lift(&[0.04, 0.16], 0.04, |x| x.abs());
        let mut config = SchemeConfig::new(4, Engine::oracle());
        assert!(matches!(backward_induction(&lift, &config), Err(Error::AssumptionViolation { .. })));
        config.allow_h_override = true;
        assert!(!backward_induction(&lift, &config).unwrap().conforming);
    }

    proptest! {
        #[test]
        fn driver_is_convex_in_gamma(g1 in -50.0f64..50.0, g2 in -50.0f64..50.0) {
            let lift = variance_lift(&[0.01, 0.04, 0.05, 0.07], 0.04, |x| x);
            let mid = driver_at(&lift, 0.5 * (g1 + g2)).value;
            let chord = 0.5 * (driver_at(&lift, g1).value + driver_at(&lift, g2).value);
            prop_assert!(mid <= chord + 1e-12);
        }
    }
}

//! Builtin problems and closed-form references.

use std::sync::Arc;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::{
    diag, lift_problem, ControlGrid, ControlPoint, ControlProblem, LatticeHint, LiftSpec, MarkovLift, PathGrid,
    ReplayCheck,
};

/// Black–Scholes price of a European call.
pub fn black_scholes_call(s0: f64, strike: f64, sigma: f64, horizon: f64) -> f64 {
    if sigma <= 0.0 || horizon <= 0.0 {
        return (s0 - strike).max(0.0);
    }
    let n = Normal::standard();
    let sd = sigma * horizon.sqrt();
    let d1 = ((s0 / strike).ln() + 0.5 * sd * sd) / sd;
    s0 * n.cdf(d1) - strike * n.cdf(d1 - sd)
}

type StateVec = Arc<dyn Fn(f64, &[f64], &ControlPoint) -> Vector + Send + Sync>;
type StateMat = Arc<dyn Fn(f64, &[f64], &ControlPoint) -> Matrix + Send + Sync>;
type StateReward = Arc<dyn Fn(f64, &[f64], &ControlPoint) -> f64 + Send + Sync>;
type StateTerminal = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type StateRefVol = Arc<dyn Fn(f64, &[f64]) -> Matrix + Send + Sync>;

/// Coefficients that only read the current state `X_t`.
pub struct MarkovCoefficients {
    pub horizon: f64,
    pub x0: Vec<f64>,
    pub controls: ControlGrid,
    pub drift: StateVec,
    pub vol: StateMat,
    pub running_reward: StateReward,
    pub terminal_reward: StateTerminal,
    pub ref_vol: StateRefVol,
    pub eps0: f64,
    pub hint: Option<LatticeHint>,
}

/// Builds the path-functional problem and its (trivial) lift from state
/// coefficients, validating the pair by replay.
pub fn markov_problem(c: MarkovCoefficients) -> Result<MarkovLift> {
    let d = c.x0.len();
    let at = move |t: f64, p: &PathGrid| {
        let mut x = vec![0.0; d];
        p.eval_into(t, &mut x);
        x
    };
    let (dr, vo, rr, te, rv) = (c.drift.clone(), c.vol.clone(), c.running_reward.clone(), c.terminal_reward.clone(), c.ref_vol.clone());
    let problem = ControlProblem::builder(c.horizon, c.x0.clone(), c.controls.clone())
        .drift(move |t, p, u| dr(t, &at(t, p), u))
        .vol(move |t, p, u| vo(t, &at(t, p), u))
        .running_reward(move |t, p, u| rr(t, &at(t, p), u))
        .terminal_reward(move |p| te(p.current()))
        .ref_vol(move |t, p| rv(t, &at(t, p)))
        .eps0(c.eps0)
        .build()?;
    let (dr, vo, rr, te, rv) = (c.drift, c.vol, c.running_reward, c.terminal_reward, c.ref_vol);
    let mut spec = LiftSpec::markovian(
        Arc::new(move |t, x, _s, u| dr(t, x, u)),
        Arc::new(move |t, x, _s, u| vo(t, x, u)),
        Arc::new(move |t, x, _s, u| rr(t, x, u)),
        Arc::new(move |x, _s| te(x)),
        Arc::new(move |t, x, _s| rv(t, x)),
    );
    spec.lattice_hint = c.hint;
    lift_problem(problem, spec, &ReplayCheck { paths: 20, steps: 8, ..ReplayCheck::default() })
}

fn call(strike: f64) -> StateTerminal {
    Arc::new(move |x: &[f64]| (x[0] - strike).max(0.0))
}

fn zero_drift(d: usize) -> StateVec {
    Arc::new(move |_, _, _| Vector::zeros(d))
}

fn no_reward() -> StateReward {
    Arc::new(|_, _, _| 0.0)
}

/// Parameters of the price-space problems.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CallParams {
    pub s0: f64,
    pub strike: f64,
    pub horizon: f64,
}

impl Default for CallParams {
    fn default() -> Self {
        Self { s0: 100.0, strike: 100.0, horizon: 1.0 }
    }
}

fn price_hint(p: &CallParams, sigma: f64) -> LatticeHint {
    let w = 8.0 * sigma * p.horizon.sqrt();
    LatticeHint { lo: p.s0 * (-w).exp(), hi: p.s0 * w.exp(), geometric: true }
}

/// European call with `dS = σ S dW`, singleton control and `σ₀ = σ`.
pub fn bs_call(p: CallParams, sigma: f64) -> Result<MarkovLift> {
    markov_problem(MarkovCoefficients {
        horizon: p.horizon,
        x0: vec![p.s0],
        controls: ControlGrid::singleton(ControlPoint::scalar(sigma * sigma)),
        drift: zero_drift(1),
        vol: Arc::new(move |_, x, _| diag(&[sigma * x[0]])),
        running_reward: no_reward(),
        terminal_reward: call(p.strike),
        ref_vol: Arc::new(move |_, x| diag(&[sigma * x[0]])),
        eps0: 1e-300,
        hint: Some(price_hint(&p, sigma)),
    })
}

/// Uncertain volatility: `dS = √u S dW` with `u` on a grid of variances,
/// reference variance `ref_var`.
pub fn uvm_call(p: CallParams, var_lo: f64, var_hi: f64, points: usize, ref_var: f64) -> Result<MarkovLift> {
    markov_problem(MarkovCoefficients {
        horizon: p.horizon,
        x0: vec![p.s0],
        controls: ControlGrid::linspace(var_lo, var_hi, points)?,
        drift: zero_drift(1),
        vol: Arc::new(|_, x, u| diag(&[u.value().sqrt() * x[0]])),
        running_reward: no_reward(),
        terminal_reward: call(p.strike),
        ref_vol: Arc::new(move |_, x| diag(&[ref_var.sqrt() * x[0]])),
        eps0: 1e-300,
        hint: Some(price_hint(&p, var_hi.sqrt())),
    })
}

/// `dX = σ₀ dW`, `Φ = X_T`: a martingale whose value is `x0` at every resolution.
pub fn linear_martingale(x0: f64, sigma0: f64, horizon: f64) -> Result<MarkovLift> {
    markov_problem(MarkovCoefficients {
        horizon,
        x0: vec![x0],
        controls: ControlGrid::singleton(ControlPoint::scalar(0.0)),
        drift: zero_drift(1),
        vol: Arc::new(move |_, _, _| diag(&[sigma0])),
        running_reward: no_reward(),
        terminal_reward: Arc::new(|x| x[0]),
        ref_vol: Arc::new(move |_, _| diag(&[sigma0])),
        eps0: sigma0 * sigma0,
        hint: Some(LatticeHint { lo: x0 - 8.0 * sigma0 * horizon.sqrt(), hi: x0 + 8.0 * sigma0 * horizon.sqrt(), geometric: false }),
    })
}

/// Arithmetic-average call under uncertain volatility. The path functional is
/// `(T⁻¹ Σ_{k≥1} h X_{t_k} − K)⁺`, lifted with `s_{k+1} = s_k + h x_{k+1}`.
pub fn asian_lift(p: CallParams, var_lo: f64, var_hi: f64, points: usize, ref_var: f64, n_hint: usize) -> Result<MarkovLift> {
    let horizon = p.horizon;
    let strike = p.strike;
    let problem = ControlProblem::builder(horizon, vec![p.s0], ControlGrid::linspace(var_lo, var_hi, points)?)
        .vol(|t, path, u| diag(&[u.value().sqrt() * path.eval(t)[0]]))
        .ref_vol(move |t, path| diag(&[ref_var.sqrt() * path.eval(t)[0]]))
        .terminal_reward(move |path| {
            let h = path.h();
            let sum: f64 = (1..=path.filled_to()).map(|k| h * path.node(k)[0]).sum();
            (sum / horizon - strike).max(0.0)
        })
        .eps0(1e-300)
        .build()?;
    let mut spec = LiftSpec {
        dim_s: 1,
        s0: vec![0.0],
        update: Arc::new(|s, x, h| vec![s[0] + h * x[0]]),
        drift: Arc::new(|_, _, _, _| Vector::zeros(1)),
        vol: Arc::new(|_, x, _, u| diag(&[u.value().sqrt() * x[0]])),
        running_reward: Arc::new(|_, _, _, _| 0.0),
        terminal_reward: Arc::new(move |_, s| (s[0] / horizon - strike).max(0.0)),
        ref_vol: Arc::new(move |_, x, _| diag(&[ref_var.sqrt() * x[0]])),
        lattice_hint: None,
    };
    spec.lattice_hint = Some(price_hint(&p, var_hi.sqrt()));
    lift_problem(problem, spec, &ReplayCheck { paths: 50, steps: n_hint.max(1), ..ReplayCheck::default() })
}

/// Settings of the variance-option example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SharpeParams {
    pub s0: f64,
    pub strike: f64,
    pub horizon: f64,
    pub var_lo: f64,
    pub var_hi: f64,
    pub points: usize,
}

impl Default for SharpeParams {
    fn default() -> Self {
        Self { s0: 1.0, strike: 1.0, horizon: 1.0, var_lo: 0.01, var_hi: 0.025, points: 4 }
    }
}

impl SharpeParams {
    fn mid(&self) -> f64 {
        0.5 * (self.var_lo + self.var_hi)
    }

    /// Reference volatility for the `ε`-perturbed problem:
    /// `diag(√(a_lo + ε²), √0.8 ε)`.
    pub fn ref_vol(&self, eps: f64) -> Matrix {
        diag(&[(self.var_lo + eps * eps).sqrt(), 0.8f64.sqrt() * eps])
    }
}

/// "Call sharpe" on the pair `(X, V)` with `X = ∫√ν dW` and `V = ∫ν dt`:
/// `Φ = (S₀ e^{X_T − V_T/2} − K)⁺ / √V_T`.
///
/// The second state coordinate is `V_t − ā t` with `ā` the mid variance, so
/// the reference process stays centred on the controlled paths. `V_T` is
/// clamped to `[a_lo T, a_hi T]`, the range it occupies without perturbation.
/// The volatility `diag(√u, 0)` is degenerate: solve it through
/// [`crate::degenerate::perturb_with_ref`] with [`SharpeParams::ref_vol`].
pub fn call_sharpe(p: SharpeParams) -> Result<MarkovLift> {
    let mid = p.mid();
    let (lo, hi) = (p.var_lo * p.horizon, p.var_hi * p.horizon);
    let (s0, strike, horizon) = (p.s0, p.strike, p.horizon);
    markov_problem(MarkovCoefficients {
        horizon,
        x0: vec![0.0, 0.0],
        controls: ControlGrid::linspace(p.var_lo, p.var_hi, p.points)?,
        drift: Arc::new(move |_, _, u| Vector::from_column_slice(&[0.0, u.value() - mid])),
        vol: Arc::new(|_, _, u| diag(&[u.value().sqrt(), 0.0])),
        running_reward: no_reward(),
        terminal_reward: Arc::new(move |x| {
            let v = (x[1] + mid * horizon).clamp(lo, hi);
            (s0 * (x[0] - 0.5 * v).exp() - strike).max(0.0) / v.sqrt()
        }),
        ref_vol: {
            let r = p.ref_vol(0.1);
            Arc::new(move |_, _| r.clone())
        },
        eps0: 1e-300,
        hint: None,
    })
}

/// Identifiers accepted by [`builtin`].
pub const BUILTINS: &[&str] = &["bs-call", "uvm-call", "call-sharpe", "asian-lift", "linear-martingale"];

/// Default grid of variances for the uncertain-volatility problem.
pub const UVM_VARIANCES: (f64, f64, usize) = (0.01, 0.04, 7);
/// Default reference variance for the uncertain-volatility problem.
pub const UVM_REF_VAR: f64 = 0.01;
/// Conforming variance band used by the Asian problem.
pub const ASIAN_VARIANCES: (f64, f64, usize, f64) = (0.02, 0.04, 5, 0.02);

/// A builtin problem with its closed-form reference value when one exists.
pub struct Builtin {
    pub id: &'static str,
    pub lift: MarkovLift,
    /// Closed-form value of the continuous-time problem.
    pub reference: Option<f64>,
    /// Degenerate volatility that needs `--perturb-eps`.
    pub degenerate: bool,
    /// Reference volatility to use under perturbation, as a function of `ε`.
    pub perturbed_ref_vol: Option<Arc<dyn Fn(f64) -> Matrix + Send + Sync>>,
}

pub fn builtin(id: &str) -> Result<Builtin> {
    let p = CallParams::default();
    let bs = |s: f64| Some(black_scholes_call(p.s0, p.strike, s, p.horizon));
    Ok(match id {
        "bs-call" => Builtin { id: "bs-call", lift: bs_call(p, 0.2)?, reference: bs(0.2), degenerate: false, perturbed_ref_vol: None },
        "uvm-call" => {
            let (lo, hi, k) = UVM_VARIANCES;
            Builtin {
                id: "uvm-call",
                lift: uvm_call(p, lo, hi, k, UVM_REF_VAR)?,
                reference: bs(hi.sqrt()),
                degenerate: false,
                perturbed_ref_vol: None,
            }
        }
        "asian-lift" => {
            let (lo, hi, k, r) = ASIAN_VARIANCES;
            Builtin { id: "asian-lift", lift: asian_lift(p, lo, hi, k, r, 16)?, reference: None, degenerate: false, perturbed_ref_vol: None }
        }
        "call-sharpe" => {
            let sp = SharpeParams::default();
            Builtin {
                id: "call-sharpe",
                lift: call_sharpe(sp)?,
                reference: None,
                degenerate: true,
                perturbed_ref_vol: Some(Arc::new(move |eps| sp.ref_vol(eps))),
            }
        }
        "linear-martingale" => Builtin {
            id: "linear-martingale",
            lift: linear_martingale(1.0, 0.2, 1.0)?,
            reference: Some(1.0),
            degenerate: false,
            perturbed_ref_vol: None,
        },
        other => return Err(Error::UnknownProblem(other.to_string())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_scholes_reference_values() {
        // textbook value for S = K = 100, σ = 0.2, T = 1, r = 0
        assert!((black_scholes_call(100.0, 100.0, 0.2, 1.0) - 7.965567455405804).abs() < 1e-9);
        assert_eq!(black_scholes_call(100.0, 90.0, 0.0, 1.0), 10.0);
    }

    #[test]
    fn builtins_construct() {
        for id in BUILTINS {
            let b = builtin(id).unwrap();
            assert_eq!(b.id, *id);
        }
        assert!(matches!(builtin("nope"), Err(Error::UnknownProblem(_))));
    }

    #[test]
    fn asian_lift_replays_on_random_paths() {
        let p = CallParams::default();
        let lift = asian_lift(p, 0.02, 0.04, 3, 0.02, 16).unwrap();
        let check = ReplayCheck { paths: 100, steps: 16, ..ReplayCheck::default() };
        assert!(lift_problem(lift.problem().clone(), lift.spec().clone(), &check).is_ok());
    }

    #[test]
    fn wrong_lift_is_reported_with_step() {
        let p = CallParams::default();
        let lift = asian_lift(p, 0.02, 0.04, 3, 0.02, 16).unwrap();
        let mut spec = lift.spec().clone();
        // left-endpoint update disagrees with the right-endpoint path sum
        spec.update = Arc::new(|s, _x, h| vec![s[0] + h * 100.0]);
        let err = lift_problem(lift.problem().clone(), spec, &ReplayCheck::default()).unwrap_err();
        assert!(matches!(err, Error::LiftMismatch { quantity: "terminal reward", .. }));
    }
}

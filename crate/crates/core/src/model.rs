//! Problem definition: controls, discrete paths with linear interpolation,
//! path-functional coefficients, and the Markovian lifting used by the scheme.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, min_eigenvalue, Matrix, Vector};

/// One element of the compact control set. Opaque to the library: only the
/// coefficient callables interpret the coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPoint(Vec<f64>);

impl ControlPoint {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn scalar(value: f64) -> Self {
        Self(vec![value])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    /// First coordinate; the common case of a one-parameter control.
    pub fn value(&self) -> f64 {
        self.0[0]
    }

    fn same_bits(&self, other: &Self) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl fmt::Display for ControlPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| format!("{v}")).collect();
        write!(f, "({})", parts.join(", "))
    }
}

/// Finite grid standing in for the control set; the sup over controls
/// becomes a max over these points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    points: Vec<ControlPoint>,
}

impl ControlGrid {
    pub fn new(points: Vec<ControlPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("control grid is empty".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if p.values().iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("control point {i} is not finite")));
            }
            if points[..i].iter().any(|q| q.same_bits(p)) {
                return Err(Error::Config(format!("duplicate control point {p}")));
            }
        }
        Ok(Self { points })
    }

    pub fn singleton(point: ControlPoint) -> Self {
        Self { points: vec![point] }
    }

    /// `count` equally spaced scalar controls on `[lo, hi]`.
    pub fn linspace(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count == 0 || !(lo <= hi) {
            return Err(Error::Config(format!("bad control interval [{lo}, {hi}] x {count}")));
        }
        if count == 1 {
            return Self::new(vec![ControlPoint::scalar(hi)]);
        }
        let step = (hi - lo) / (count - 1) as f64;
        let points = (0..count)
            .map(|i| {
                let v = if i + 1 == count { hi } else { lo + step * i as f64 };
                ControlPoint::scalar(v)
            })
            .collect();
        Self::new(points)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[ControlPoint] {
        &self.points
    }

    pub fn get(&self, index: usize) -> &ControlPoint {
        &self.points[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ControlPoint> {
        self.points.iter()
    }
}

/// Values of a path on the uniform grid `t_k = k T / n`.
///
/// Nodes `0..=filled_to` are valid; for `t > t_{filled_to}` the path is frozen
/// at its last node, which is how a path stopped at `t` is represented.
#[derive(Clone, Debug, PartialEq)]
pub struct PathGrid {
    horizon: f64,
    n: usize,
    dim: usize,
    nodes: Vec<f64>,
    filled_to: usize,
}

pub fn make_path(n: usize, horizon: f64, x0: &[f64]) -> Result<PathGrid> {
    PathGrid::new(n, horizon, x0)
}

impl PathGrid {
    pub fn new(n: usize, horizon: f64, x0: &[f64]) -> Result<Self> {
        if n == 0 {
            return Err(Error::Config("path needs at least one step".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        if x0.is_empty() {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        let dim = x0.len();
        let mut nodes = vec![0.0; (n + 1) * dim];
        nodes[..dim].copy_from_slice(x0);
        Ok(Self { horizon, n, dim, nodes, filled_to: 0 })
    }

    pub fn steps(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn h(&self) -> f64 {
        self.horizon / self.n as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n {
            self.horizon
        } else {
            k as f64 * self.h()
        }
    }

    pub fn filled_to(&self) -> usize {
        self.filled_to
    }

    pub fn node(&self, k: usize) -> &[f64] {
        &self.nodes[k * self.dim..(k + 1) * self.dim]
    }

    pub fn current(&self) -> &[f64] {
        self.node(self.filled_to)
    }

    /// Appends the next node.
    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Config(format!("node has dimension {}, path has {}", x.len(), self.dim)));
        }
        if self.filled_to == self.n {
            return Err(Error::Config("path is already complete".into()));
        }
        self.filled_to += 1;
        let k = self.filled_to;
        self.nodes[k * self.dim..(k + 1) * self.dim].copy_from_slice(x);
        Ok(())
    }

    /// Copy of the path stopped at node `k`.
    pub fn truncated(&self, k: usize) -> PathGrid {
        let mut out = self.clone();
        out.filled_to = k.min(self.filled_to);
        out
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let last = self.time(self.filled_to);
        if t >= last || self.filled_to == 0 {
            out.copy_from_slice(self.current());
            return;
        }
        let t = t.max(0.0);
        let h = self.h();
        let r = t / h;
        if (r - r.round()).abs() < 1e-12 {
            out.copy_from_slice(self.node(r.round() as usize));
            return;
        }
        let k = (r.floor() as usize).min(self.filled_to - 1);
        let w = ((t - self.time(k)) / h).clamp(0.0, 1.0);
        let (a, b) = (self.node(k), self.node(k + 1));
        if w == 0.0 || w == 1.0 {
            out.copy_from_slice(if w == 0.0 { a } else { b });
            return;
        }
        for i in 0..self.dim {
            out[i] = a[i] + w * (b[i] - a[i]);
        }
    }

    /// Linear interpolation of the filled nodes, frozen after `t_{filled_to}`.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out);
        out
    }

    /// Largest node increment divided by `h`; a Lipschitz constant for `eval`.
    pub fn lipschitz(&self) -> f64 {
        let h = self.h();
        (0..self.filled_to)
            .map(|k| {
                let (a, b) = (self.node(k), self.node(k + 1));
                a.iter().zip(b).map(|(x, y)| (y - x).powi(2)).sum::<f64>().sqrt() / h
            })
            .fold(0.0, f64::max)
    }
}

pub type DriftFn = Arc<dyn Fn(f64, &PathGrid, &ControlPoint) -> Vector + Send + Sync>;
pub type VolFn = Arc<dyn Fn(f64, &PathGrid, &ControlPoint) -> Matrix + Send + Sync>;
pub type RewardFn = Arc<dyn Fn(f64, &PathGrid, &ControlPoint) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(&PathGrid) -> f64 + Send + Sync>;
pub type RefVolFn = Arc<dyn Fn(f64, &PathGrid) -> Matrix + Send + Sync>;

/// A path-dependent control problem: maximize
/// `E[∫ L(t, X, ν_t) dt + Φ(X)]` over controlled diffusions with drift `μ`
/// and volatility `σ`, plus the reference volatility `σ₀` used to simulate.
///
/// Callables receive the whole path but must only read it up to time `t`.
#[derive(Clone)]
pub struct ControlProblem {
    dim_x: usize,
    horizon: f64,
    x0: Vec<f64>,
    drift: DriftFn,
    vol: VolFn,
    running_reward: RewardFn,
    terminal_reward: TerminalFn,
    control_set: ControlGrid,
    ref_vol: RefVolFn,
    eps0: f64,
}

impl fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem")
            .field("dim_x", &self.dim_x)
            .field("horizon", &self.horizon)
            .field("x0", &self.x0)
            .field("controls", &self.control_set.len())
            .field("eps0", &self.eps0)
            .finish()
    }
}

pub struct ControlProblemBuilder {
    horizon: f64,
    x0: Vec<f64>,
    control_set: ControlGrid,
    drift: Option<DriftFn>,
    vol: Option<VolFn>,
    running_reward: Option<RewardFn>,
    terminal_reward: Option<TerminalFn>,
    ref_vol: Option<RefVolFn>,
    eps0: f64,
}

impl ControlProblemBuilder {
    pub fn drift(mut self, f: impl Fn(f64, &PathGrid, &ControlPoint) -> Vector + Send + Sync + 'static) -> Self {
        self.drift = Some(Arc::new(f));
        self
    }

    pub fn vol(mut self, f: impl Fn(f64, &PathGrid, &ControlPoint) -> Matrix + Send + Sync + 'static) -> Self {
        self.vol = Some(Arc::new(f));
        self
    }

    pub fn running_reward(mut self, f: impl Fn(f64, &PathGrid, &ControlPoint) -> f64 + Send + Sync + 'static) -> Self {
        self.running_reward = Some(Arc::new(f));
        self
    }

    pub fn terminal_reward(mut self, f: impl Fn(&PathGrid) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal_reward = Some(Arc::new(f));
        self
    }

    pub fn ref_vol(mut self, f: impl Fn(f64, &PathGrid) -> Matrix + Send + Sync + 'static) -> Self {
        self.ref_vol = Some(Arc::new(f));
        self
    }

    /// Lower bound `ε₀` with `σ₀σ₀ᵀ ⪰ ε₀ I`.
    pub fn eps0(mut self, eps0: f64) -> Self {
        self.eps0 = eps0;
        self
    }

    pub fn build(self) -> Result<ControlProblem> {
        let d = self.x0.len();
        if d == 0 {
            return Err(Error::Config("state dimension must be positive".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if !(self.eps0 > 0.0) {
            return Err(Error::Config("eps0 must be positive".into()));
        }
        let vol = self.vol.ok_or_else(|| Error::Config("volatility is required".into()))?;
        let ref_vol = self.ref_vol.ok_or_else(|| Error::Config("reference volatility is required".into()))?;
        let terminal_reward = self
            .terminal_reward
            .ok_or_else(|| Error::Config("terminal reward is required".into()))?;
        Ok(ControlProblem {
            dim_x: d,
            horizon: self.horizon,
            x0: self.x0,
            drift: self.drift.unwrap_or_else(|| Arc::new(move |_, _, _| Vector::zeros(d))),
            vol,
            running_reward: self.running_reward.unwrap_or_else(|| Arc::new(|_, _, _| 0.0)),
            terminal_reward,
            control_set: self.control_set,
            ref_vol,
            eps0: self.eps0,
        })
    }
}

impl ControlProblem {
    pub fn builder(horizon: f64, x0: Vec<f64>, control_set: ControlGrid) -> ControlProblemBuilder {
        ControlProblemBuilder {
            horizon,
            x0,
            control_set,
            drift: None,
            vol: None,
            running_reward: None,
            terminal_reward: None,
            ref_vol: None,
            eps0: 1e-12,
        }
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    pub fn controls(&self) -> &ControlGrid {
        &self.control_set
    }

    pub fn eps0(&self) -> f64 {
        self.eps0
    }

    pub fn drift(&self, t: f64, path: &PathGrid, u: &ControlPoint) -> Vector {
        (self.drift)(t, path, u)
    }

    pub fn vol(&self, t: f64, path: &PathGrid, u: &ControlPoint) -> Matrix {
        (self.vol)(t, path, u)
    }

    pub fn running_reward(&self, t: f64, path: &PathGrid, u: &ControlPoint) -> f64 {
        (self.running_reward)(t, path, u)
    }

    pub fn terminal_reward(&self, path: &PathGrid) -> f64 {
        (self.terminal_reward)(path)
    }

    pub fn ref_vol(&self, t: f64, path: &PathGrid) -> Matrix {
        (self.ref_vol)(t, path)
    }

    pub(crate) fn with_vol(&self, vol: VolFn) -> Self {
        Self { vol, ..self.clone() }
    }

    pub(crate) fn with_ref_vol(&self, ref_vol: RefVolFn, eps0: f64) -> Self {
        Self { ref_vol, eps0, ..self.clone() }
    }

    /// Spot-checks the invariants along the probe paths: the `ε₀` floor of
    /// `σ₀σ₀ᵀ` and finiteness of every coefficient.
    pub fn check_on(&self, probes: &[PathGrid]) -> Result<()> {
        for path in probes {
            for k in 0..=path.filled_to() {
                let stopped = path.truncated(k);
                let t = path.time(k);
                let s0 = self.ref_vol(t, &stopped);
                if !all_finite(&s0) {
                    return Err(Error::Evaluation { what: "reference volatility", control: 0 });
                }
                let floor = min_eigenvalue(&(&s0 * s0.transpose()));
                if floor < self.eps0 * (1.0 - 1e-12) {
                    return Err(Error::AssumptionViolation {
                        t_index: k,
                        control: 0,
                        reason: format!("σ₀σ₀ᵀ has eigenvalue {floor:.3e} below eps0 {:.3e}", self.eps0),
                        count: 1,
                    });
                }
                for (j, u) in self.control_set.iter().enumerate() {
                    if !all_finite(&self.vol(t, &stopped, u)) {
                        return Err(Error::Evaluation { what: "volatility", control: j });
                    }
                    if self.drift(t, &stopped, u).iter().any(|v| !v.is_finite()) {
                        return Err(Error::Evaluation { what: "drift", control: j });
                    }
                    if !self.running_reward(t, &stopped, u).is_finite() {
                        return Err(Error::Evaluation { what: "running reward", control: j });
                    }
                }
            }
        }
        Ok(())
    }
}

pub type LiftedVecFn = Arc<dyn Fn(f64, &[f64], &[f64], &ControlPoint) -> Vector + Send + Sync>;
pub type LiftedMatFn = Arc<dyn Fn(f64, &[f64], &[f64], &ControlPoint) -> Matrix + Send + Sync>;
pub type LiftedRewardFn = Arc<dyn Fn(f64, &[f64], &[f64], &ControlPoint) -> f64 + Send + Sync>;
pub type LiftedTerminalFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
pub type LiftedRefVolFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> Matrix + Send + Sync>;
/// `(s_k, x_{k+1}, h) ↦ s_{k+1}`.
pub type CompanionUpdateFn = Arc<dyn Fn(&[f64], &[f64], f64) -> Vec<f64> + Send + Sync>;

/// Where an oracle lattice in the state variable should live.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeHint {
    pub lo: f64,
    pub hi: f64,
    /// Space nodes geometrically (for positive states such as prices).
    pub geometric: bool,
}

/// Description of a Markovian lifting: the companion state, its update rule,
/// and the coefficients expressed as functions of `(t, x, s, u)`.
#[derive(Clone)]
pub struct LiftSpec {
    pub dim_s: usize,
    pub s0: Vec<f64>,
    pub update: CompanionUpdateFn,
    pub drift: LiftedVecFn,
    pub vol: LiftedMatFn,
    pub running_reward: LiftedRewardFn,
    pub terminal_reward: LiftedTerminalFn,
    pub ref_vol: LiftedRefVolFn,
    pub lattice_hint: Option<LatticeHint>,
}

impl LiftSpec {
    /// A lift with no companion state; the views only see the current node.
    pub fn markovian(
        drift: LiftedVecFn,
        vol: LiftedMatFn,
        running_reward: LiftedRewardFn,
        terminal_reward: LiftedTerminalFn,
        ref_vol: LiftedRefVolFn,
    ) -> Self {
        Self {
            dim_s: 0,
            s0: Vec::new(),
            update: Arc::new(|_, _, _| Vec::new()),
            drift,
            vol,
            running_reward,
            terminal_reward,
            ref_vol,
            lattice_hint: None,
        }
    }

    pub fn with_hint(mut self, hint: LatticeHint) -> Self {
        self.lattice_hint = Some(hint);
        self
    }
}

/// Replay validation settings for [`lift_problem`].
#[derive(Clone, Copy, Debug)]
pub struct ReplayCheck {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for ReplayCheck {
    fn default() -> Self {
        Self { paths: 100, steps: 16, seed: 0x5eed_11f7, tolerance: 1e-12 }
    }
}

/// A control problem together with a validated Markovian lift.
#[derive(Clone)]
pub struct MarkovLift {
    problem: ControlProblem,
    spec: LiftSpec,
}

impl fmt::Debug for MarkovLift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MarkovLift")
            .field("problem", &self.problem)
            .field("dim_s", &self.spec.dim_s)
            .field("s0", &self.spec.s0)
            .finish()
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

/// Builds the lift and checks, by replaying random reference paths, that the
/// lifted views reproduce the path functionals at every grid time.
pub fn lift_problem(problem: ControlProblem, spec: LiftSpec, check: &ReplayCheck) -> Result<MarkovLift> {
    if spec.s0.len() != spec.dim_s {
        return Err(Error::Config(format!(
            "companion state s0 has length {}, expected {}",
            spec.s0.len(),
            spec.dim_s
        )));
    }
    let lift = MarkovLift { problem, spec };
    lift.replay(check)?;
    Ok(lift)
}

impl MarkovLift {
    /// Skips replay validation; for lifts whose views are the coefficients themselves.
    pub fn unchecked(problem: ControlProblem, spec: LiftSpec) -> Self {
        Self { problem, spec }
    }

    fn replay(&self, check: &ReplayCheck) -> Result<()> {
        let p = &self.problem;
        let d = p.dim_x();
        let n = check.steps.max(1);
        let h = p.horizon() / n as f64;
        for m in 0..check.paths {
            let mut rng = ChaCha8Rng::seed_from_u64(check.seed);
            rng.set_stream(m as u64);
            let mut path = PathGrid::new(n, p.horizon(), p.x0())?;
            let mut s = self.spec.s0.clone();
            for k in 0..=n {
                let t = path.time(k);
                let x = path.current().to_vec();
                if k == n {
                    let expected = p.terminal_reward(&path);
                    let actual = self.terminal_reward(&x, &s);
                    if !close(expected, actual, check.tolerance) {
                        return Err(Error::LiftMismatch { step: k, quantity: "terminal reward", expected, actual });
                    }
                    break;
                }
                let s0_path = p.ref_vol(t, &path);
                let s0_lift = self.ref_vol(t, &x, &s);
                compare_mats(&s0_path, &s0_lift, k, "reference volatility", check.tolerance)?;
                for u in p.controls().iter() {
                    let (e, a) = (p.running_reward(t, &path, u), self.running_reward(t, &x, &s, u));
                    if !close(e, a, check.tolerance) {
                        return Err(Error::LiftMismatch { step: k, quantity: "running reward", expected: e, actual: a });
                    }
                    compare_mats(&p.vol(t, &path, u), &self.vol(t, &x, &s, u), k, "volatility", check.tolerance)?;
                    let (de, da) = (p.drift(t, &path, u), self.drift(t, &x, &s, u));
                    for (e, a) in de.iter().zip(da.iter()) {
                        if !close(*e, *a, check.tolerance) {
                            return Err(Error::LiftMismatch { step: k, quantity: "drift", expected: *e, actual: *a });
                        }
                    }
                }
                let dw = Vector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut rng))) * h.sqrt();
                let next = Vector::from_column_slice(&x) + s0_path * dw;
                path.push(next.as_slice())?;
                s = self.update(&s, next.as_slice(), h);
            }
        }
        Ok(())
    }

    pub fn problem(&self) -> &ControlProblem {
        &self.problem
    }

    pub fn spec(&self) -> &LiftSpec {
        &self.spec
    }

    pub fn dim_x(&self) -> usize {
        self.problem.dim_x()
    }

    pub fn dim_s(&self) -> usize {
        self.spec.dim_s
    }

    pub fn horizon(&self) -> f64 {
        self.problem.horizon()
    }

    pub fn x0(&self) -> &[f64] {
        self.problem.x0()
    }

    pub fn s0(&self) -> &[f64] {
        &self.spec.s0
    }

    pub fn controls(&self) -> &ControlGrid {
        self.problem.controls()
    }

    pub fn lattice_hint(&self) -> Option<LatticeHint> {
        self.spec.lattice_hint
    }

    pub fn update(&self, s: &[f64], x_next: &[f64], h: f64) -> Vec<f64> {
        (self.spec.update)(s, x_next, h)
    }

    pub fn drift(&self, t: f64, x: &[f64], s: &[f64], u: &ControlPoint) -> Vector {
        (self.spec.drift)(t, x, s, u)
    }

    pub fn vol(&self, t: f64, x: &[f64], s: &[f64], u: &ControlPoint) -> Matrix {
        (self.spec.vol)(t, x, s, u)
    }

    pub fn running_reward(&self, t: f64, x: &[f64], s: &[f64], u: &ControlPoint) -> f64 {
        (self.spec.running_reward)(t, x, s, u)
    }

    pub fn terminal_reward(&self, x: &[f64], s: &[f64]) -> f64 {
        (self.spec.terminal_reward)(x, s)
    }

    pub fn ref_vol(&self, t: f64, x: &[f64], s: &[f64]) -> Matrix {
        (self.spec.ref_vol)(t, x, s)
    }

    pub(crate) fn rebuild(problem: ControlProblem, spec: LiftSpec) -> Self {
        Self { problem, spec }
    }
}

fn compare_mats(e: &Matrix, a: &Matrix, step: usize, quantity: &'static str, tol: f64) -> Result<()> {
    if e.shape() != a.shape() {
        return Err(Error::LiftMismatch { step, quantity, expected: e.len() as f64, actual: a.len() as f64 });
    }
    for (x, y) in e.iter().zip(a.iter()) {
        if !close(*x, *y, tol) {
            return Err(Error::LiftMismatch { step, quantity, expected: *x, actual: *y });
        }
    }
    Ok(())
}

/// `d×d` matrix with `v` on the diagonal.
pub fn diag(values: &[f64]) -> Matrix {
    DMatrix::from_diagonal(&Vector::from_column_slice(values))
}

/// `1×1` matrix.
pub fn scalar_matrix(v: f64) -> Matrix {
    DMatrix::from_element(1, 1, v)
}

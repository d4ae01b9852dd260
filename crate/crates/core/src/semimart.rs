//! The controlled discrete-time semimartingale: strategies, their simulated
//! values, and a brute-force dynamic program over lattice strategies.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Open01};

use crate::error::{Error, Result};
use crate::kernel::{density_eval, SamplerCache, StepDensityParams};
use crate::linalg::{Matrix, Vector};
use crate::model::{MarkovLift, PathGrid};
use crate::par;
use crate::quad::GaussLegendre;
use crate::scheme::oracle::{plan_lattices, Interpolation, Lattice, OracleConfig, Quadrature, TerminalMode};
use crate::scheme::{driver_g, DriverInput, SchemeResult, ValueSurface};

/// Largest problem [`brute_force_value`] accepts.
pub const MAX_STEPS: usize = 3;
pub const MAX_NODES: usize = 31;
pub const MAX_CONTROLS: usize = 4;

pub type MarkovRule = Arc<dyn Fn(usize, &[f64], &[f64]) -> usize + Send + Sync>;
pub type HistoryRule = Arc<dyn Fn(usize, &PathGrid) -> usize + Send + Sync>;

/// A strategy `φ_k` returning an index into the control grid.
#[derive(Clone)]
pub enum Strategy {
    Constant(usize),
    /// Nearest-node lookup in a [`LatticePlan`].
    Lattice(LatticePlan),
    /// A function of the lifted state `(k, x_k, s_k)`.
    Markov(MarkovRule),
    /// A function of the whole discrete history `(x_0, …, x_k)`.
    History(HistoryRule),
}

impl fmt::Debug for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Constant(j) => write!(f, "Constant({j})"),
            Strategy::Lattice(p) => f.debug_tuple("Lattice").field(p).finish(),
            Strategy::Markov(_) => f.write_str("Markov(..)"),
            Strategy::History(_) => f.write_str("History(..)"),
        }
    }
}

impl Strategy {
    pub fn choose(&self, k: usize, x: &[f64], s: &[f64], path: Option<&PathGrid>) -> Result<usize> {
        Ok(match self {
            Strategy::Constant(j) => *j,
            Strategy::Lattice(plan) => plan.choice(k, x[0])?,
            Strategy::Markov(f) => f(k, x, s),
            Strategy::History(f) => {
                let path = path.ok_or_else(|| Error::StrategyUnavailable("history not recorded".into()))?;
                f(k, path)
            }
        })
    }

    fn needs_history(&self) -> bool {
        matches!(self, Strategy::History(_))
    }
}

/// Per-step lattices with a control per node and the values of the plan.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticePlan {
    /// Lattice of step `k` for `k = 0..=n`; step 0 is the single node `x0`.
    pub lattices: Vec<Lattice>,
    /// Control index per node for `k = 0..n`.
    pub choices: Vec<Vec<usize>>,
    /// Values per node for `k = 0..=n`.
    pub values: Vec<Vec<f64>>,
}

impl LatticePlan {
    pub fn steps(&self) -> usize {
        self.choices.len()
    }

    /// Control at the node of step `k` nearest to `x`.
    pub fn choice(&self, k: usize, x: f64) -> Result<usize> {
        let lat = self
            .lattices
            .get(k)
            .filter(|_| k < self.choices.len())
            .ok_or_else(|| Error::StrategyUnavailable(format!("plan has no step {k}")))?;
        let nodes = lat.nodes();
        let i = nodes.partition_point(|&v| v < x);
        let i = if i == 0 {
            0
        } else if i == nodes.len() || x - nodes[i - 1] <= nodes[i] - x {
            i - 1
        } else {
            i
        };
        Ok(self.choices[k][i])
    }
}

/// Sample mean of the strategy's reward with its standard error.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlledRun {
    pub mean: f64,
    pub stderr: f64,
    pub rewards: Vec<f64>,
    /// `X^{h,φ}_k` per path, step-major (`d = 1`).
    pub states: Vec<f64>,
    pub paths: usize,
}

impl ControlledRun {
    pub fn state(&self, k: usize, m: usize) -> f64 {
        self.states[k * self.paths + m]
    }
}

/// Simulates `X_{k+1} = X_k + H_h(t_k, X̂, φ_k, U_{k+1})` with `U` uniform and
/// returns the rewards `Σ h L + Φ`. Path `m` uses ChaCha8 stream `m` of `seed`.
pub fn simulate_controlled(lift: &MarkovLift, strategy: &Strategy, n: usize, paths: usize, seed: u64) -> Result<ControlledRun> {
    if lift.dim_x() != 1 {
        return Err(Error::DimensionUnsupported { dim: lift.dim_x(), what: "controlled simulation" });
    }
    if n == 0 || paths < 2 {
        return Err(Error::Config(format!("need n ≥ 1 and M ≥ 2, got n = {n}, M = {paths}")));
    }
    let h = lift.horizon() / n as f64;
    let ncontrols = lift.controls().len();
    let cache = SamplerCache::new();
    let history = strategy.needs_history();
    let per_path = par::map_range(paths, |m| -> Result<(f64, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(m as u64);
        let mut x = lift.x0().to_vec();
        let mut s = lift.s0().to_vec();
        let mut path = if history { Some(PathGrid::new(n, lift.horizon(), &x)?) } else { None };
        let mut xs = Vec::with_capacity(n + 1);
        xs.push(x[0]);
        let mut reward = 0.0;
        for k in 0..n {
            let t = k as f64 * h;
            let j = strategy.choose(k, &x, &s, path.as_ref())?;
            if j >= ncontrols {
                return Err(Error::StrategyUnavailable(format!("control index {j} outside a grid of {ncontrols}")));
            }
            let u = lift.controls().get(j);
            reward += h * lift.running_reward(t, &x, &s, u);
            let params = StepDensityParams::from_coefficients(
                &lift.vol(t, &x, &s, u),
                &lift.ref_vol(t, &x, &s),
                &lift.drift(t, &x, &s, u),
                h,
            );
            let uniform: f64 = Open01.sample(&mut rng);
            let next = x[0] + cache.get(&params)?.quantile(uniform);
            s = lift.update(&s, &[next], h);
            x[0] = next;
            if let Some(p) = path.as_mut() {
                p.push(&x)?;
            }
            xs.push(next);
        }
        reward += lift.terminal_reward(&x, &s);
        if !reward.is_finite() {
            return Err(Error::Evaluation { what: "strategy reward", control: 0 });
        }
        Ok((reward, xs))
    });
    let mut rewards = Vec::with_capacity(paths);
    let mut states = vec![0.0; (n + 1) * paths];
    for (m, r) in per_path.into_iter().enumerate() {
        let (v, xs) = r?;
        rewards.push(v);
        for (k, x) in xs.into_iter().enumerate() {
            states[k * paths + m] = x;
        }
    }
    let mean = par::sum_range(paths, |m| rewards[m]) / paths as f64;
    let var = par::sum_range(paths, |m| (rewards[m] - mean).powi(2)) / (paths - 1) as f64;
    Ok(ControlledRun { mean, stderr: (var / paths as f64).sqrt(), rewards, states, paths })
}

/// The lattice fixture shared with the oracle engine.
struct LatticeProgram<'a> {
    lift: &'a MarkovLift,
    n: usize,
    h: f64,
    lattice: Lattice,
    gl: GaussLegendre,
    max_width: f64,
    reach: f64,
    interpolation: Interpolation,
    terminal: TerminalMode,
}

impl<'a> LatticeProgram<'a> {
    fn new(lift: &'a MarkovLift, n: usize, config: &OracleConfig) -> Result<Self> {
        if lift.dim_x() != 1 || lift.dim_s() != 0 {
            return Err(Error::SizeLimit(format!(
                "brute force needs d = 1 without companion state, got d = {}, d′ = {}",
                lift.dim_x(),
                lift.dim_s()
            )));
        }
        if n == 0 || n > MAX_STEPS {
            return Err(Error::SizeLimit(format!("brute force needs 1 ≤ n ≤ {MAX_STEPS}, got {n}")));
        }
        if lift.controls().len() > MAX_CONTROLS {
            return Err(Error::SizeLimit(format!("brute force takes at most {MAX_CONTROLS} controls, got {}", lift.controls().len())));
        }
        let Quadrature::Composite { order, max_width, reach } = config.quadrature else {
            return Err(Error::Config("brute force needs the composite quadrature".into()));
        };
        if config.interpolation != Interpolation::Monotone {
            // with negative interpolation weights a per-node max is not the
            // best lattice strategy
            return Err(Error::Config("brute force needs monotone interpolation".into()));
        }
        let (lattice, _) = plan_lattices(lift, n, config, 0)?;
        if lattice.len() > MAX_NODES {
            return Err(Error::SizeLimit(format!("brute force takes at most {MAX_NODES} nodes, got {}", lattice.len())));
        }
        Ok(Self {
            lift,
            n,
            h: lift.horizon() / n as f64,
            lattice,
            gl: GaussLegendre::new(order),
            max_width,
            reach,
            interpolation: config.interpolation,
            terminal: config.terminal,
        })
    }

    fn nodes(&self, k: usize) -> Vec<f64> {
        if k == 0 {
            vec![self.lift.x0()[0]]
        } else {
            self.lattice.nodes().to_vec()
        }
    }

    fn lattices(&self) -> Vec<Lattice> {
        (0..=self.n).map(|k| if k == 0 { Lattice::single(self.lift.x0()[0]) } else { self.lattice.clone() }).collect()
    }

    fn terminal_values(&self) -> Vec<f64> {
        self.nodes(self.n).iter().map(|&x| self.lift.terminal_reward(&[x], &[])).collect()
    }

    /// `h L + ∫ V_{k+1}(x + y) f_h(y) dy` at node `x` under control `j`.
    fn transition(&self, k: usize, x: f64, j: usize, next: &[f64]) -> Result<f64> {
        let lift = self.lift;
        let t = k as f64 * self.h;
        let u = lift.controls().get(j);
        let sigma0: Matrix = lift.ref_vol(t, &[x], &[]);
        let params = StepDensityParams::from_coefficients(&lift.vol(t, &[x], &[], u), &sigma0, &lift.drift(t, &[x], &[], u), self.h);
        let sd = sigma0[(0, 0)].abs() * self.h.sqrt();
        let radius = self.reach * sd;
        let mut breaks: Vec<f64> = self.lattice.nodes().iter().map(|&b| b - x).filter(|y| y.abs() < radius).collect();
        breaks.push(-radius);
        breaks.push(radius);
        breaks.sort_by(|a, b| a.total_cmp(b));
        breaks.dedup();
        let exact_terminal = k + 1 == self.n && self.terminal == TerminalMode::Exact;
        let mut failure = None;
        let integral = self.gl.integrate_pieces(&breaks, self.max_width * sd, |y| {
            let v = if exact_terminal {
                lift.terminal_reward(&[x + y], &[])
            } else {
                self.lattice.interpolate(next, x + y, self.interpolation)
            };
            match density_eval(&params, &Vector::from_element(1, y)) {
                Ok(f) => v * f,
                Err(e) => {
                    failure.get_or_insert(e);
                    0.0
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(integral + self.h * lift.running_reward(t, &[x], &[], u))
    }
}

/// `V^h_0` over all lattice-measurable strategies, by backward dynamic
/// programming with a per-node max and transition integrals against `f_h`.
/// The lattice and quadrature come from `config` exactly as the oracle uses
/// them. The interpolation must be [`Interpolation::Monotone`]: the per-node
/// max is the best strategy only when the step operator is monotone.
pub fn brute_force_value(lift: &MarkovLift, n: usize, config: &OracleConfig) -> Result<(f64, LatticePlan)> {
    let prog = LatticeProgram::new(lift, n, config)?;
    let controls = lift.controls().len();
    let mut values = vec![Vec::new(); n + 1];
    let mut choices = vec![Vec::new(); n];
    values[n] = prog.terminal_values();
    for k in (0..n).rev() {
        let mut vk = Vec::new();
        let mut ck = Vec::new();
        for x in prog.nodes(k) {
            let mut best = (f64::NEG_INFINITY, 0);
            for j in 0..controls {
                let v = prog.transition(k, x, j, &values[k + 1])?;
                if v > best.0 {
                    best = (v, j);
                }
            }
            vk.push(best.0);
            ck.push(best.1);
        }
        values[k] = vk;
        choices[k] = ck;
    }
    let plan = LatticePlan { lattices: prog.lattices(), choices, values };
    Ok((plan.values[0][0], plan))
}

/// Value on the lattice of one fixed per-node strategy (policy evaluation).
pub fn lattice_strategy_value(lift: &MarkovLift, n: usize, config: &OracleConfig, choices: &[Vec<usize>]) -> Result<f64> {
    let prog = LatticeProgram::new(lift, n, config)?;
    if choices.len() != n || (0..n).any(|k| choices[k].len() != prog.nodes(k).len()) {
        return Err(Error::Config("strategy table does not match the lattice".into()));
    }
    let mut next = prog.terminal_values();
    for k in (0..n).rev() {
        let mut vk = Vec::new();
        for (i, x) in prog.nodes(k).into_iter().enumerate() {
            let j = choices[k][i];
            if j >= lift.controls().len() {
                return Err(Error::StrategyUnavailable(format!("control index {j} out of range")));
            }
            vk.push(prog.transition(k, x, j, &next)?);
        }
        next = vk;
    }
    Ok(next[0])
}

/// The selector `φ_k(x, s) = argmax_u` of the driver at the scheme's `(Γ̂_k, Ẑ_k)`.
pub fn extract_strategy(lift: &MarkovLift, result: &SchemeResult) -> Result<Strategy> {
    if result.surface.steps() != result.n || result.n == 0 {
        return Err(Error::StrategyUnavailable(format!(
            "scheme kept {} steps of diagnostics for n = {}",
            result.surface.steps(),
            result.n
        )));
    }
    if lift.controls().len() == 1 {
        return Ok(Strategy::Constant(0));
    }
    if let ValueSurface::Regression(r) = &result.surface {
        if r.fits.iter().any(|f| f.alpha_z.is_empty() || f.alpha_gamma.is_empty()) {
            return Err(Error::StrategyUnavailable("regression fits without Z or Γ".into()));
        }
    }
    let surface = Arc::new(result.surface.clone());
    let lift = lift.clone();
    let h = result.h;
    Ok(Strategy::Markov(Arc::new(move |k, x, s| {
        let (z, gamma) = surface.derivatives(k, x, s);
        driver_g(&lift, h, &DriverInput { t_index: k, x, s, gamma: &gamma, z: &z }).map(|v| v.argmax).unwrap_or(0)
    })))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{diag, ControlGrid, ControlPoint, ControlProblem, LiftSpec};

    fn lattice_lift(controls: &[(f64, f64)]) -> MarkovLift {
        let grid = ControlGrid::new(controls.iter().map(|&(a, b)| ControlPoint::new(vec![a, b])).collect()).unwrap();
        let problem = ControlProblem::builder(1.0, vec![0.0], grid)
            .drift(|_, _, u| Vector::from_element(1, u.values()[1]))
            .vol(|_, _, u| diag(&[u.values()[0].sqrt()]))
            .terminal_reward(|p| p.current()[0].abs())
            .ref_vol(|_, _| diag(&[1.0]))
            .build()
            .unwrap();
        let spec = LiftSpec::markovian(
            Arc::new(|_, _, _, u| Vector::from_element(1, u.values()[1])),
            Arc::new(|_, _, _, u| diag(&[u.values()[0].sqrt()])),
            Arc::new(|_, _, _, _| 0.0),
            Arc::new(|x, _| x[0].abs()),
            Arc::new(|_, _, _| diag(&[1.0])),
        );
        MarkovLift::unchecked(problem, spec)
    }

    fn fixture(nodes: usize) -> OracleConfig {
        OracleConfig {
            quadrature: Quadrature::Composite { order: 12, max_width: 0.5, reach: 9.0 },
            terminal: TerminalMode::Lattice,
            interpolation: Interpolation::Monotone,
            lattice: Some((0..nodes).map(|i| -3.0 + 6.0 * i as f64 / (nodes - 1) as f64).collect()),
            ..OracleConfig::default()
        }
    }

    #[test]
    fn size_limits_are_enforced() {
        let lift = lattice_lift(&[(1.0, 0.0), (1.5, 0.2)]);
        assert!(matches!(brute_force_value(&lift, 4, &fixture(5)), Err(Error::SizeLimit(_))));
        assert!(matches!(brute_force_value(&lift, 2, &fixture(33)), Err(Error::SizeLimit(_))));
        let five = lattice_lift(&[(1.0, 0.0), (1.1, 0.0), (1.2, 0.0), (1.3, 0.0), (1.4, 0.0)]);
        assert!(matches!(brute_force_value(&five, 2, &fixture(5)), Err(Error::SizeLimit(_))));
    }

    #[test]
    fn per_node_max_equals_enumerated_strategy_max() {
        let lift = lattice_lift(&[(1.0, 0.0), (1.5, 0.3)]);
        let config = fixture(5);
        let (best, plan) = brute_force_value(&lift, 2, &config).unwrap();
        let mut enumerated = f64::NEG_INFINITY;
        for c0 in 0..2 {
            for mask in 0..(1usize << 5) {
                let step1: Vec<usize> = (0..5).map(|i| (mask >> i) & 1).collect();
                let v = lattice_strategy_value(&lift, 2, &config, &[vec![c0], step1]).unwrap();
                enumerated = enumerated.max(v);
            }
        }
        assert!((best - enumerated).abs() < 1e-12, "{best} vs {enumerated}");
        let replay = lattice_strategy_value(&lift, 2, &config, &plan.choices).unwrap();
        assert!((replay - best).abs() < 1e-12);
    }

    #[test]
    fn brute_force_dominates_constant_strategies() {
        let lift = lattice_lift(&[(1.0, 0.0), (1.5, 0.2), (2.0, -0.3)]);
        let config = fixture(9);
        let (best, _) = brute_force_value(&lift, 3, &config).unwrap();
        for j in 0..3 {
            let constant = vec![vec![j], vec![j; 9], vec![j; 9]];
            assert!(lattice_strategy_value(&lift, 3, &config, &constant).unwrap() <= best + 1e-12);
        }
    }

    #[test]
    fn lattice_plan_lookup_is_nearest_node() {
        let plan = LatticePlan {
            lattices: vec![Lattice::single(0.0), Lattice::new(vec![-1.0, 0.0, 1.0]).unwrap()],
            choices: vec![vec![0], vec![1, 2, 3]],
            values: vec![vec![0.0], vec![0.0; 3]],
        };
        assert_eq!(plan.choice(1, -5.0).unwrap(), 1);
        assert_eq!(plan.choice(1, 0.4).unwrap(), 2);
        assert_eq!(plan.choice(1, 0.6).unwrap(), 3);
        assert!(plan.choice(2, 0.0).is_err());
    }

    #[test]
    fn constant_strategy_on_martingale_keeps_the_mean() {
        let lift = crate::problems::linear_martingale(1.0, 0.2, 1.0).unwrap();
        let run = simulate_controlled(&lift, &Strategy::Constant(0), 8, 20_000, 3).unwrap();
        assert!((run.mean - 1.0).abs() < 4.0 * run.stderr, "{} ± {}", run.mean, run.stderr);
        let again = simulate_controlled(&lift, &Strategy::Constant(0), 8, 20_000, 3).unwrap();
        assert_eq!(run.rewards, again.rewards);
    }

    #[test]
    fn out_of_grid_choice_is_rejected() {
        let lift = crate::problems::linear_martingale(1.0, 0.2, 1.0).unwrap();
        let err = simulate_controlled(&lift, &Strategy::Constant(3), 2, 10, 0).unwrap_err();
        assert!(matches!(err, Error::StrategyUnavailable(_)));
    }
}

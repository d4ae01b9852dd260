//! Quadrature engine: conditional expectations computed by deterministic
//! quadrature on a state lattice instead of regression. Exact up to
//! interpolation and quadrature error; restricted to `d = 1`, `d′ ≤ 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::model::MarkovLift;
use crate::par;
use crate::quad::{GaussHermite, GaussLegendre};

use super::{driver_g, simulate_reference, DriverInput};

/// Quadrature against the standard normal in `ξ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrature {
    GaussHermite { nodes: usize },
    /// Gauss–Legendre pieces of width at most `max_width` on `[−reach, reach]`,
    /// split at the lattice nodes so piecewise interpolants are integrated exactly.
    Composite { order: usize, max_width: f64, reach: f64 },
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature::GaussHermite { nodes: 64 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    Linear,
    /// Linear inside the lattice and constant outside it. All weights are
    /// nonnegative, so the step operator is monotone in the node values.
    Monotone,
    /// Four-point Lagrange on the surrounding nodes.
    #[default]
    Cubic,
}

/// How `Y_n = Φ̄` enters the last step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalMode {
    /// Evaluate `Φ̄` at the quadrature points.
    #[default]
    Exact,
    /// Tabulate `Φ̄` on the lattice and interpolate like any other step.
    Lattice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub x_nodes: usize,
    pub s_nodes: usize,
    pub quadrature: Quadrature,
    pub interpolation: Interpolation,
    pub terminal: TerminalMode,
    /// Explicit x-lattice; overrides the problem's hint and the pilot.
    pub lattice: Option<Vec<f64>>,
    /// Paths of the pilot simulation that sizes lattices without a hint.
    pub pilot_paths: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            x_nodes: 801,
            s_nodes: 101,
            quadrature: Quadrature::default(),
            interpolation: Interpolation::Cubic,
            terminal: TerminalMode::Exact,
            lattice: None,
            pilot_paths: 4000,
        }
    }
}

/// Strictly increasing 1-d grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Lattice {
    nodes: Vec<f64>,
}

impl Lattice {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() || nodes.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("lattice must be nonempty and finite".into()));
        }
        if nodes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("lattice must be strictly increasing".into()));
        }
        Ok(Self { nodes })
    }

    pub fn uniform(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count == 1 {
            return Self::new(vec![0.5 * (lo + hi)]);
        }
        let step = (hi - lo) / (count - 1) as f64;
        Self::new((0..count).map(|i| if i + 1 == count { hi } else { lo + step * i as f64 }).collect())
    }

    pub fn geometric(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if !(lo > 0.0) {
            return Err(Error::Config("geometric lattice needs a positive lower end".into()));
        }
        let l = Self::uniform(lo.ln(), hi.ln(), count)?;
        Self::new(l.nodes.into_iter().map(f64::exp).collect())
    }

    pub fn single(x: f64) -> Self {
        Self { nodes: vec![x] }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Interpolation stencil at `x`: first index, weights, count. Outside the
    /// lattice the two end nodes extrapolate linearly, except in
    /// [`Interpolation::Monotone`] which holds the end value.
    pub fn stencil(&self, x: f64, mode: Interpolation) -> (usize, [f64; 4], usize) {
        let nd = &self.nodes;
        let n = nd.len();
        if n == 1 {
            return (0, [1.0, 0.0, 0.0, 0.0], 1);
        }
        let linear = |i: usize| {
            let t = (x - nd[i]) / (nd[i + 1] - nd[i]);
            (i, [1.0 - t, t, 0.0, 0.0], 2)
        };
        if x <= nd[0] {
            return if mode == Interpolation::Monotone { (0, [1.0, 0.0, 0.0, 0.0], 1) } else { linear(0) };
        }
        if x >= nd[n - 1] {
            return if mode == Interpolation::Monotone { (n - 1, [1.0, 0.0, 0.0, 0.0], 1) } else { linear(n - 2) };
        }
        let i = (nd.partition_point(|&v| v <= x) - 1).min(n - 2);
        if mode != Interpolation::Cubic || n < 4 {
            return linear(i);
        }
        let start = i.saturating_sub(1).min(n - 4);
        let p = &nd[start..start + 4];
        let mut w = [0.0; 4];
        for a in 0..4 {
            let mut l = 1.0;
            for b in 0..4 {
                if a != b {
                    l *= (x - p[b]) / (p[a] - p[b]);
                }
            }
            w[a] = l;
        }
        (start, w, 4)
    }

    pub fn interpolate(&self, values: &[f64], x: f64, mode: Interpolation) -> f64 {
        let (start, w, len) = self.stencil(x, mode);
        (0..len).map(|a| w[a] * values[start + a]).sum()
    }
}

/// Tensor interpolation of `table[ix · ns + is]` over `xs × ss`.
pub fn interpolate2(xs: &Lattice, ss: &Lattice, table: &[f64], x: f64, s: f64, mode: Interpolation) -> f64 {
    let ns = ss.len();
    let (sx, wx, lx) = xs.stencil(x, mode);
    let (s0, ws, ls) = ss.stencil(s, mode);
    let mut total = 0.0;
    for a in 0..lx {
        let row = (sx + a) * ns;
        let inner: f64 = (0..ls).map(|b| ws[b] * table[row + s0 + b]).sum();
        total += wx[a] * inner;
    }
    total
}

/// Quadrature nodes and weights in `ξ`, with the normal density folded into
/// the weights.
#[derive(Clone, Debug)]
pub struct Rule {
    kind: Quadrature,
    gh: Option<GaussHermite>,
    gl: Option<GaussLegendre>,
}

impl Rule {
    pub fn new(kind: Quadrature) -> Self {
        match kind {
            Quadrature::GaussHermite { nodes } => Self { kind, gh: Some(GaussHermite::new(nodes)), gl: None },
            Quadrature::Composite { order, .. } => Self { kind, gh: None, gl: Some(GaussLegendre::new(order)) },
        }
    }

    /// Points `(ξ, w)` with `Σ w f(ξ) ≈ E[f(N(0,1))]`; `breaks` are extra
    /// split points in `ξ` for the composite rule.
    pub fn points(&self, breaks: &[f64]) -> Vec<(f64, f64)> {
        match self.kind {
            Quadrature::GaussHermite { .. } => {
                let gh = self.gh.as_ref().expect("rule built for Gauss–Hermite");
                gh.nodes().iter().cloned().zip(gh.weights().iter().cloned()).collect()
            }
            Quadrature::Composite { max_width, reach, .. } => {
                let gl = self.gl.as_ref().expect("rule built for Gauss–Legendre");
                let mut cuts: Vec<f64> = breaks.iter().cloned().filter(|b| b.abs() < reach).collect();
                cuts.push(-reach);
                cuts.push(reach);
                cuts.sort_by(|a, b| a.total_cmp(b));
                cuts.dedup();
                let mut out = Vec::new();
                let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
                for pair in cuts.windows(2) {
                    let (a, b) = (pair[0], pair[1]);
                    let pieces = ((b - a) / max_width).ceil().max(1.0) as usize;
                    let width = (b - a) / pieces as f64;
                    for p in 0..pieces {
                        let lo = a + p as f64 * width;
                        let hi = if p + 1 == pieces { b } else { lo + width };
                        let (half, mid) = (0.5 * (hi - lo), 0.5 * (hi + lo));
                        for (&t, &w) in gl.nodes().iter().zip(gl.weights()) {
                            let xi = mid + half * t;
                            out.push((xi, half * w * norm * (-0.5 * xi * xi).exp()));
                        }
                    }
                }
                out
            }
        }
    }

    pub fn is_composite(&self) -> bool {
        matches!(self.kind, Quadrature::Composite { .. })
    }
}

/// `E_k[Y]`, `Z_k`, `Γ_k` at one state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Moments {
    pub ey: f64,
    pub z: f64,
    pub gamma: f64,
}

/// Quadrature of `y(x + σ₀√h ξ) · {1, w_z, w_γ}` for a 1-d state, with
/// `w_z = ξ/(σ₀√h)` and `w_γ = (ξ² − 1)/(σ₀² h)`.
pub fn conditional_moments(y: impl Fn(f64) -> f64, x: f64, sigma0: f64, h: f64, points: &[(f64, f64)]) -> Moments {
    let sd = sigma0 * h.sqrt();
    let (mut ey, mut ez, mut eg) = (0.0, 0.0, 0.0);
    for &(xi, w) in points {
        let v = w * y(x + sd * xi);
        ey += v;
        ez += v * xi;
        eg += v * (xi * xi - 1.0);
    }
    Moments { ey, z: ez / sd, gamma: eg / (sd * sd) }
}

/// One step of the lattice solution: tables over the step's nodes.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatticeStep {
    pub k: usize,
    pub values: Vec<f64>,
    pub z: Vec<f64>,
    pub gamma: Vec<f64>,
    pub argmax: Vec<usize>,
}

/// Lattices and per-step tables of an oracle run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatticeSurface {
    pub x: Lattice,
    /// Companion lattice per step; a single node when `d′ = 0` or at `k = 0`.
    pub s: Vec<Lattice>,
    pub steps: Vec<LatticeStep>,
    pub interpolation: Interpolation,
    pub x0: f64,
}

impl LatticeSurface {
    fn table_lookup(&self, k: usize, table: &[f64], x: f64, s: f64) -> f64 {
        if k == 0 {
            return table[0];
        }
        interpolate2(&self.x, &self.s[k], table, x, s, Interpolation::Linear)
    }

    /// `(Z_k, Γ_k)` at `(x, s)` by linear interpolation of the tables.
    pub fn derivatives(&self, k: usize, x: f64, s: f64) -> (f64, f64) {
        let st = &self.steps[k];
        (self.table_lookup(k, &st.z, x, s), self.table_lookup(k, &st.gamma, x, s))
    }

    pub fn value(&self, k: usize, x: f64, s: f64) -> f64 {
        let st = &self.steps[k];
        if k == 0 {
            return st.values[0];
        }
        interpolate2(&self.x, &self.s[k], &st.values, x, s, self.interpolation)
    }
}

/// Lattice plan shared by the oracle and the brute-force value: x-lattice and
/// per-step companion lattices.
pub fn plan_lattices(lift: &MarkovLift, n: usize, config: &OracleConfig, seed: u64) -> Result<(Lattice, Vec<Lattice>)> {
    if lift.dim_x() != 1 || lift.dim_s() > 1 {
        return Err(Error::EngineUnsupported(format!(
            "quadrature engine needs d = 1 and d′ ≤ 1, got d = {}, d′ = {}",
            lift.dim_x(),
            lift.dim_s()
        )));
    }
    let need_pilot = config.lattice.is_none() && lift.lattice_hint().is_none() || lift.dim_s() == 1;
    let pilot = if need_pilot { Some(simulate_reference(lift, n, config.pilot_paths.max(2), seed ^ 0x9117)?) } else { None };
    let x = if let Some(nodes) = &config.lattice {
        Lattice::new(nodes.clone())?
    } else if let Some(hint) = lift.lattice_hint() {
        if hint.geometric {
            Lattice::geometric(hint.lo, hint.hi, config.x_nodes)?
        } else {
            Lattice::uniform(hint.lo, hint.hi, config.x_nodes)?
        }
    } else {
        let p = pilot.as_ref().expect("pilot simulated when no lattice is given");
        let (lo, hi) = range((0..=n).flat_map(|k| (0..p.paths()).map(move |m| (k, m))).map(|(k, m)| p.x(k, m)[0]));
        let pad = 0.25 * (hi - lo).max(1e-12);
        Lattice::uniform(lo - pad, hi + pad, config.x_nodes)?
    };
    let mut s = Vec::with_capacity(n + 1);
    for k in 0..=n {
        if lift.dim_s() == 0 {
            s.push(Lattice::single(0.0));
        } else if k == 0 {
            s.push(Lattice::single(lift.s0()[0]));
        } else {
            let p = pilot.as_ref().expect("pilot simulated for companion lattices");
            let (lo, hi) = range((0..p.paths()).map(|m| p.s(k, m)[0]));
            if hi - lo <= 1e-12 * (1.0 + lo.abs()) {
                s.push(Lattice::single(lo));
            } else {
                let pad = 0.1 * (hi - lo);
                s.push(Lattice::uniform(lo - pad, hi + pad, config.s_nodes)?);
            }
        }
    }
    Ok((x, s))
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

pub(crate) struct OracleRun {
    pub y0: f64,
    pub surface: LatticeSurface,
}

/// Backward induction with quadrature expectations on the lattice plan.
pub(crate) fn solve(lift: &MarkovLift, n: usize, config: &OracleConfig, seed: u64) -> Result<OracleRun> {
    let (xl, sl) = plan_lattices(lift, n, config, seed)?;
    let h = lift.horizon() / n as f64;
    let rule = Rule::new(config.quadrature);
    let gh_points = if rule.is_composite() { Vec::new() } else { rule.points(&[]) };
    let mode = config.interpolation;
    let has_s = lift.dim_s() == 1;
    let ncontrols = lift.controls().len();

    let terminal_table: Option<Vec<f64>> = match config.terminal {
        TerminalMode::Exact => None,
        TerminalMode::Lattice => {
            let ss = &sl[n];
            Some(
                xl.nodes()
                    .iter()
                    .flat_map(|&x| ss.nodes().iter().map(move |&s| (x, s)))
                    .map(|(x, s)| {
                        let sv = [s];
                        lift.terminal_reward(&[x], if has_s { &sv[..] } else { &[] })
                    })
                    .collect(),
            )
        }
    };

    let mut next: Option<Vec<f64>> = terminal_table;
    let mut steps = Vec::with_capacity(n);
    for k in (0..n).rev() {
        let t = k as f64 * h;
        let nodes: Vec<(f64, f64)> = if k == 0 {
            vec![(lift.x0()[0], if has_s { lift.s0()[0] } else { 0.0 })]
        } else {
            xl.nodes().iter().flat_map(|&x| sl[k].nodes().iter().map(move |&s| (x, s))).collect()
        };
        let next_table = next.as_deref();
        let next_s = &sl[k + 1];
        let exact_terminal = k + 1 == n && next_table.is_none();
        let results = par::map_range(nodes.len(), |i| -> Result<(f64, f64, f64, usize)> {
            let (x, s) = nodes[i];
            let s_slice: &[f64] = if has_s { std::slice::from_ref(&nodes[i].1) } else { &[] };
            let sigma0 = lift.ref_vol(t, &[x], s_slice)[(0, 0)];
            if !(sigma0 != 0.0) || !sigma0.is_finite() {
                return Err(Error::Singular("σ₀ on the lattice"));
            }
            let y = |xp: f64| -> f64 {
                let sp = if has_s { lift.update(&[s], &[xp], h) } else { Vec::new() };
                if exact_terminal {
                    lift.terminal_reward(&[xp], &sp)
                } else {
                    let table = next_table.expect("table present below the terminal step");
                    interpolate2(&xl, next_s, table, xp, sp.first().copied().unwrap_or(0.0), mode)
                }
            };
            let local;
            let points: &[(f64, f64)] = if rule.is_composite() {
                let sd = sigma0.abs() * h.sqrt();
                let breaks: Vec<f64> = xl.nodes().iter().map(|&b| (b - x) / sd).collect();
                local = rule.points(&breaks);
                &local
            } else {
                &gh_points
            };
            let m = conditional_moments(y, x, sigma0, h, points);
            let g = driver_g(
                lift,
                h,
                &DriverInput {
                    t_index: k,
                    x: &[x],
                    s: s_slice,
                    gamma: &Matrix::from_element(1, 1, m.gamma),
                    z: &Vector::from_element(1, m.z),
                },
            )?;
            Ok((m.ey + h * g.value, m.z, m.gamma, g.argmax))
        });
        let mut step = LatticeStep {
            k,
            values: Vec::with_capacity(nodes.len()),
            z: Vec::with_capacity(nodes.len()),
            gamma: Vec::with_capacity(nodes.len()),
            argmax: Vec::with_capacity(nodes.len()),
        };
        for r in results {
            let (v, z, g, a) = r?;
            if !v.is_finite() {
                return Err(Error::Evaluation { what: "lattice value", control: a.min(ncontrols - 1) });
            }
            step.values.push(v);
            step.z.push(z);
            step.gamma.push(g);
            step.argmax.push(a);
        }
        next = Some(step.values.clone());
        steps.push(step);
    }
    steps.reverse();
    let y0 = steps[0].values[0];
    Ok(OracleRun {
        y0,
        surface: LatticeSurface { x: xl, s: sl, steps, interpolation: mode, x0: lift.x0()[0] },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gh() -> Vec<(f64, f64)> {
        Rule::new(Quadrature::GaussHermite { nodes: 64 }).points(&[])
    }

    #[test]
    fn linear_function_moments() {
        let m = conditional_moments(|x| x, 0.7, 1.0, 0.3, &gh());
        assert!((m.ey - 0.7).abs() < 1e-10);
        assert!((m.z - 1.0).abs() < 1e-10);
        assert!(m.gamma.abs() < 1e-10);
    }

    #[test]
    fn quadratic_recovers_second_derivative() {
        let m = conditional_moments(|x| x * x, -0.4, 1.0, 0.2, &gh());
        assert!((m.gamma - 2.0).abs() < 1e-8);
        assert!((m.z + 0.8).abs() < 1e-8);
    }

    #[test]
    fn lognormal_mean() {
        let m = conditional_moments(f64::exp, 0.3, 1.0, 0.1, &gh());
        assert!((m.ey - (0.35f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn composite_rule_matches_hermite() {
        let rule = Rule::new(Quadrature::Composite { order: 12, max_width: 0.5, reach: 12.0 });
        let pts = rule.points(&[-0.3, 1.7]);
        let mass: f64 = pts.iter().map(|p| p.1).sum();
        assert!((mass - 1.0).abs() < 1e-12);
        let a = conditional_moments(|x| (x - 0.1).max(0.0), 0.0, 1.0, 1.0, &pts);
        // E[(ξ − 0.1)⁺] = φ(0.1) − 0.1 (1 − Φ(0.1))
        let phi = (-0.005f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let cdf = 0.5 * statrs::function::erf::erfc(-0.1 / std::f64::consts::SQRT_2);
        let want = phi - 0.1 * (1.0 - cdf);
        let pts2 = rule.points(&[0.1]);
        let b = conditional_moments(|x| (x - 0.1).max(0.0), 0.0, 1.0, 1.0, &pts2);
        assert!((b.ey - want).abs() < 1e-13);
        assert!((a.ey - want).abs() < 1e-4);
    }

    #[test]
    fn stencils_reproduce_cubics() {
        let l = Lattice::new(vec![0.0, 0.5, 1.3, 2.0, 2.2, 3.5]).unwrap();
        let f = |x: f64| 1.0 - x + 0.5 * x * x - 0.1 * x * x * x;
        let vals: Vec<f64> = l.nodes().iter().map(|&x| f(x)).collect();
        for x in [0.1, 0.9, 1.5, 2.1, 3.0] {
            assert!((l.interpolate(&vals, x, Interpolation::Cubic) - f(x)).abs() < 1e-12);
        }
        let g: Vec<f64> = l.nodes().iter().map(|&x| 2.0 * x - 1.0).collect();
        for x in [-3.0, 0.2, 5.0] {
            assert!((l.interpolate(&g, x, Interpolation::Linear) - (2.0 * x - 1.0)).abs() < 1e-12);
            assert!((l.interpolate(&g, x, Interpolation::Cubic) - (2.0 * x - 1.0)).abs() < 1e-12);
        }
    }
}

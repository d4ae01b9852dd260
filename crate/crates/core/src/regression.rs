//! Least-squares estimation of the conditional expectations: bases on the
//! lifted state, the empirical projection, target truncation and the two
//! projection schemes.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, Matrix, Vector};
use crate::model::MarkovLift;
use crate::par;
use crate::scheme::{driver_g, DriverInput, Ensemble};

/// Condition number above which the ridge fallback engages.
pub const RIDGE_CONDITION: f64 = 1e12;
/// Ridge strength relative to `trace / I` of the Gram matrix.
pub const RIDGE_LAMBDA: f64 = 1e-10;

/// Basis family for the regressions on `(x, s)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisSpec {
    /// All monomials of total degree at most `degree` in the standardized coordinates.
    Polynomial { degree: usize },
    /// Per coordinate: `1, z, (z − q_l)⁺` with `knots` knots at empirical quantiles.
    Hinge { knots: usize },
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec::Polynomial { degree: 3 }
    }
}

impl BasisSpec {
    pub fn label(&self) -> String {
        match self {
            BasisSpec::Polynomial { degree } => format!("poly{degree}"),
            BasisSpec::Hinge { knots } => format!("hinge{knots}"),
        }
    }

    /// Number of basis functions for a state of dimension `dim` with no
    /// constant coordinates.
    pub fn size(&self, dim: usize) -> usize {
        match *self {
            BasisSpec::Polynomial { degree } => binomial(dim + degree, degree),
            BasisSpec::Hinge { knots } => 1 + dim * (1 + knots),
        }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
enum Terms {
    Monomials(Vec<Vec<u8>>),
    Hinges(Vec<(usize, Option<f64>)>),
}

/// A basis frozen on one step's sample: coordinate standardization plus terms.
/// Coordinates that are constant across the sample are dropped.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Basis {
    spec: BasisSpec,
    dim: usize,
    active: Vec<usize>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    terms: Terms,
}

fn monomials(vars: usize, degree: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    for total in 0..=degree {
        let mut current = vec![0u8; vars];
        fill(&mut out, &mut current, 0, total);
    }
    out
}

fn fill(out: &mut Vec<Vec<u8>>, current: &mut Vec<u8>, pos: usize, left: usize) {
    if pos + 1 >= current.len() {
        if let Some(last) = current.last_mut() {
            *last = left as u8;
            out.push(current.clone());
        } else if left == 0 {
            out.push(Vec::new());
        }
        return;
    }
    for e in (0..=left).rev() {
        current[pos] = e as u8;
        fill(out, current, pos + 1, left - e);
    }
    current[pos] = 0;
}

impl Basis {
    /// Freezes `spec` on the `rows × dim` sample `states` (row-major).
    pub fn build(spec: BasisSpec, states: &[f64], dim: usize) -> Result<Self> {
        let rows = if dim == 0 { 0 } else { states.len() / dim };
        if rows == 0 && dim > 0 {
            return Err(Error::Config("regression sample is empty".into()));
        }
        let sums = par::sum_vec_range(rows, dim, |m, acc| {
            for j in 0..dim {
                acc[j] += states[m * dim + j];
            }
        });
        let mean: Vec<f64> = sums.iter().map(|s| s / rows.max(1) as f64).collect();
        let sq = par::sum_vec_range(rows, dim, |m, acc| {
            for j in 0..dim {
                let d = states[m * dim + j] - mean[j];
                acc[j] += d * d;
            }
        });
        let sd: Vec<f64> = sq.iter().map(|s| (s / rows.max(1) as f64).sqrt()).collect();
        let active: Vec<usize> = (0..dim).filter(|&j| sd[j] > 1e-12 * (1.0 + mean[j].abs())).collect();
        let scale: Vec<f64> = sd.iter().map(|&v| if v > 0.0 { v } else { 1.0 }).collect();
        let terms = match spec {
            BasisSpec::Polynomial { degree } => Terms::Monomials(monomials(active.len(), degree)),
            BasisSpec::Hinge { knots } => {
                let mut t = vec![(usize::MAX, None)];
                for (a, &j) in active.iter().enumerate() {
                    t.push((a, None));
                    let mut col: Vec<f64> = (0..rows).map(|m| (states[m * dim + j] - mean[j]) / scale[j]).collect();
                    col.sort_by(|x, y| x.total_cmp(y));
                    let mut last = f64::NEG_INFINITY;
                    for l in 1..=knots {
                        let q = col[((l * rows) / (knots + 1)).min(rows - 1)];
                        if q > last {
                            t.push((a, Some(q)));
                            last = q;
                        }
                    }
                }
                Terms::Hinges(t)
            }
        };
        Ok(Self { spec, dim, active, mean, scale, terms })
    }

    pub fn spec(&self) -> BasisSpec {
        self.spec
    }

    pub fn len(&self) -> usize {
        match &self.terms {
            Terms::Monomials(m) => m.len(),
            Terms::Hinges(h) => h.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates that vary across the fitting sample.
    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn eval_into(&self, state: &[f64], out: &mut [f64]) {
        let z: Vec<f64> = self.active.iter().map(|&j| (state[j] - self.mean[j]) / self.scale[j]).collect();
        match &self.terms {
            Terms::Monomials(list) => {
                for (o, exps) in out.iter_mut().zip(list) {
                    let mut v = 1.0;
                    for (zi, &e) in z.iter().zip(exps) {
                        if e > 0 {
                            v *= zi.powi(e as i32);
                        }
                    }
                    *o = v;
                }
            }
            Terms::Hinges(list) => {
                for (o, &(a, knot)) in out.iter_mut().zip(list) {
                    *o = match (a, knot) {
                        (usize::MAX, _) => 1.0,
                        (a, None) => z[a],
                        (a, Some(q)) => (z[a] - q).max(0.0),
                    };
                }
            }
        }
    }

    pub fn eval(&self, state: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.eval_into(state, &mut out);
        out
    }

    /// `Σ_i α_i p_i(state)`.
    pub fn predict(&self, coefficients: &[f64], state: &[f64]) -> f64 {
        self.eval(state).iter().zip(coefficients).map(|(p, a)| p * a).sum()
    }

    /// Row-major `rows × len` design matrix.
    pub fn design(&self, states: &[f64]) -> Design {
        let rows = if self.dim == 0 { 0 } else { states.len() / self.dim };
        let cols = self.len();
        let chunks = par::map_range(rows, |m| self.eval(&states[m * self.dim..(m + 1) * self.dim]));
        let mut data = Vec::with_capacity(rows * cols);
        for c in chunks {
            data.extend(c);
        }
        Design { rows, cols, data }
    }
}

/// Row-major design matrix.
#[derive(Clone, Debug)]
pub struct Design {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Design {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.data[m * self.cols..(m + 1) * self.cols]
    }

    pub fn predict(&self, m: usize, coefficients: &[f64]) -> f64 {
        self.row(m).iter().zip(coefficients).map(|(p, a)| p * a).sum()
    }
}

/// Linear solver for the normal equations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    #[default]
    NormalEquations,
    Qr,
}

enum Factor {
    Normal(Cholesky<f64, Dyn>),
    Qr { q: Matrix, r: Matrix },
}

/// A factorized least-squares problem, reusable across targets.
pub struct LeastSquares<'a> {
    design: &'a Design,
    factor: Factor,
    pub condition: f64,
    pub ridge: bool,
}

impl<'a> LeastSquares<'a> {
    pub fn new(design: &'a Design, solver: Solver) -> Result<Self> {
        let (rows, cols) = (design.rows, design.cols);
        if rows < cols {
            return Err(Error::Config(format!("{rows} samples for {cols} basis functions")));
        }
        let flat = par::sum_vec_range(rows, cols * cols, |m, acc| {
            let r = design.row(m);
            for i in 0..cols {
                let ri = r[i];
                for j in 0..cols {
                    acc[i * cols + j] += ri * r[j];
                }
            }
        });
        let mut gram = DMatrix::from_row_slice(cols, cols, &flat) / rows as f64;
        let eig = SymmetricEigen::new(gram.clone());
        let top = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let bottom = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let condition = if bottom > 0.0 { top / bottom } else { f64::INFINITY };
        let ridge = !(condition <= RIDGE_CONDITION);
        if ridge {
            let lambda = RIDGE_LAMBDA * gram.trace() / cols as f64;
            for i in 0..cols {
                gram[(i, i)] += lambda;
            }
        }
        let factor = match (solver, ridge) {
            (Solver::Qr, false) => {
                let x = DMatrix::from_row_slice(rows, cols, &design.data);
                let qr = x.qr();
                Factor::Qr { q: qr.q(), r: qr.r() }
            }
            _ => Factor::Normal(Cholesky::new(gram).ok_or(Error::Singular("regression Gram matrix"))?),
        };
        Ok(Self { design, factor, condition, ridge })
    }

    /// Coefficients for each of the `targets` (all of length `rows`).
    pub fn solve(&self, targets: &[&[f64]]) -> Vec<Vec<f64>> {
        let (rows, cols) = (self.design.rows, self.design.cols);
        match &self.factor {
            Factor::Normal(chol) => {
                let nt = targets.len();
                let flat = par::sum_vec_range(rows, cols * nt, |m, acc| {
                    let r = self.design.row(m);
                    for (t, target) in targets.iter().enumerate() {
                        let y = target[m];
                        for i in 0..cols {
                            acc[t * cols + i] += r[i] * y;
                        }
                    }
                });
                (0..nt)
                    .map(|t| {
                        let rhs = DVector::from_column_slice(&flat[t * cols..(t + 1) * cols]) / rows as f64;
                        chol.solve(&rhs).iter().cloned().collect()
                    })
                    .collect()
            }
            Factor::Qr { q, r } => targets
                .iter()
                .map(|target| {
                    let qty = q.transpose() * DVector::from_column_slice(target);
                    r.solve_upper_triangular(&qty)
                        .map(|v| v.iter().cloned().collect())
                        .unwrap_or_else(|| vec![f64::NAN; cols])
                })
                .collect(),
        }
    }

    pub fn design(&self) -> &Design {
        self.design
    }
}

/// Result of one least-squares fit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fit {
    pub coefficients: Vec<f64>,
    /// Root mean square of the fitted residuals.
    pub residual_rms: f64,
    pub condition: f64,
    pub ridge: bool,
}

/// Empirical least squares of `targets` on `spec` evaluated at `states`
/// (`M × dim`, row-major).
pub fn fit_step(states: &[f64], dim: usize, targets: &[f64], spec: BasisSpec) -> Result<(Basis, Fit)> {
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("regression targets must be finite".into()));
    }
    let basis = Basis::build(spec, states, dim)?;
    let design = basis.design(states);
    if design.rows != targets.len() {
        return Err(Error::Config(format!("{} states for {} targets", design.rows, targets.len())));
    }
    let ls = LeastSquares::new(&design, Solver::NormalEquations)?;
    let coefficients = ls.solve(&[targets]).remove(0);
    let residual_rms = rms_residual(&design, &coefficients, targets);
    let fit = Fit { coefficients, residual_rms, condition: ls.condition, ridge: ls.ridge };
    Ok((basis, fit))
}

fn rms_residual(design: &Design, coefficients: &[f64], targets: &[f64]) -> f64 {
    let n = targets.len();
    let ss = par::sum_range(n, |m| (design.predict(m, coefficients) - targets[m]).powi(2));
    (ss / n.max(1) as f64).sqrt()
}

/// Clips `targets` into `[−bound, bound]` and returns the number of hits.
pub fn truncate_targets(targets: &mut [f64], bound: f64) -> usize {
    let mut hits = 0;
    for t in targets.iter_mut() {
        if t.abs() > bound {
            *t = t.clamp(-bound, bound);
            hits += 1;
        }
    }
    hits
}

fn clip(v: f64, bound: f64, hits: &mut usize) -> f64 {
    if v.abs() > bound {
        *hits += 1;
        v.clamp(-bound, bound)
    } else {
        v
    }
}

/// Truncation bounds derived from the terminal values: `B_y = growth · max|Φ|`,
/// and for the weighted targets `B_y · 6/(√h λ)` and `B_y · 36/(h λ²)` with
/// `λ` the smallest singular value of `σ₀` on the path.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub enabled: bool,
    pub growth: f64,
}

impl Default for Truncation {
    fn default() -> Self {
        Self { enabled: true, growth: 10.0 }
    }
}

/// Which `Ẑ_k`, `Γ̂_k` enter the driver on each path.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivativeSource {
    /// Basis predictions at the path's own state.
    #[default]
    Fitted,
    /// The unprojected products `Y · w` of the path.
    Raw,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectionScheme {
    /// One-step targets `Ŷ_{k+1} + h Ḡ_k`.
    #[default]
    One,
    /// Targets `Ŷ_T + Σ_{i ≥ k} h Ḡ_i` accumulated to the horizon.
    Two,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionConfig {
    pub scheme: ProjectionScheme,
    pub basis: BasisSpec,
    pub solver: Solver,
    pub truncation: Truncation,
    pub derivatives: DerivativeSource,
    /// Subtract the step's continuation fit (and, for `Γ`, the first-order
    /// term `ẑᵀσ₀ΔW`) from the weighted targets. The weights have zero
    /// conditional mean against these terms, so only the variance changes.
    pub control_variate: bool,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            scheme: ProjectionScheme::One,
            basis: BasisSpec::default(),
            solver: Solver::NormalEquations,
            truncation: Truncation::default(),
            derivatives: DerivativeSource::Fitted,
            control_variate: true,
        }
    }
}

/// Fitted coefficients of one step, enough to evaluate `Ŷ_k`, `Ẑ_k`, `Γ̂_k` anywhere.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepFit {
    pub k: usize,
    pub basis: Basis,
    pub alpha_y: Vec<f64>,
    /// One coefficient vector per component of `Z`.
    pub alpha_z: Vec<Vec<f64>>,
    /// One coefficient vector per entry `(i, j)`, `i ≤ j`, of `Γ`.
    pub alpha_gamma: Vec<Vec<f64>>,
    pub residual_y: f64,
    pub condition: f64,
    pub ridge: bool,
    pub truncation_hits: usize,
    pub argmax_counts: Vec<u64>,
}

impl StepFit {
    pub fn y(&self, state: &[f64]) -> f64 {
        self.basis.predict(&self.alpha_y, state)
    }

    pub fn z_gamma(&self, state: &[f64], d: usize) -> (Vector, Matrix) {
        let p = self.basis.eval(state);
        let dot = |a: &[f64]| p.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
        let z = Vector::from_iterator(d, self.alpha_z.iter().map(|a| dot(a)));
        let mut g = Matrix::zeros(d, d);
        let mut idx = 0;
        for i in 0..d {
            for j in i..d {
                let v = dot(&self.alpha_gamma[idx]);
                g[(i, j)] = v;
                g[(j, i)] = v;
                idx += 1;
            }
        }
        (z, g)
    }
}

/// Per-path output of one backward step.
pub struct StepOutput {
    /// `Ŷ_k` at each path's state.
    pub y: Vec<f64>,
    /// `Ḡ_k` on each path.
    pub g: Vec<f64>,
    pub fit: StepFit,
}

struct StepContext<'a> {
    lift: &'a MarkovLift,
    ensemble: &'a Ensemble,
    config: &'a RegressionConfig,
    bound_y: f64,
}

impl StepContext<'_> {
    fn states(&self, k: usize) -> Vec<f64> {
        let e = self.ensemble;
        let dim = e.state_dim();
        let rows = par::map_range(e.paths(), |m| {
            let mut row = vec![0.0; dim];
            e.state_into(k, m, &mut row);
            row
        });
        rows.concat()
    }

    /// Fits `Z`, `Γ` from `base · w`, evaluates the driver per path, then fits
    /// `base + h Ḡ`. Returns the step output and the unclipped `base + h Ḡ`.
    fn step(&self, k: usize, base: &[f64]) -> Result<(StepOutput, Vec<f64>)> {
        let e = self.ensemble;
        let (d, m_paths, h) = (e.dim_x(), e.paths(), e.h());
        let dim = e.state_dim();
        let states = self.states(k);
        let basis = Basis::build(self.config.basis, &states, dim)?;
        let design = basis.design(&states);
        let ls = LeastSquares::new(&design, self.config.solver)?;
        let n_gamma = d * (d + 1) / 2;
        let bound_y = self.bound_y;

        let mut hits = 0usize;
        let clipped: Vec<f64> = base.iter().map(|&v| clip(v, bound_y, &mut hits)).collect();
        let centre: Vec<f64> = if self.config.control_variate {
            let alpha_c = ls.solve(&[&clipped]).remove(0);
            par::map_range(m_paths, |m| design.predict(m, &alpha_c))
        } else {
            vec![0.0; m_paths]
        };
        let bounds = |m: usize| {
            let sigma0 = e.sigma0(k, m);
            let lam = if d == 1 {
                sigma0[(0, 0)].abs()
            } else {
                min_eigenvalue(&(&sigma0 * sigma0.transpose())).max(0.0).sqrt()
            };
            (bound_y * 6.0 / (h.sqrt() * lam), bound_y * 36.0 / (h * lam * lam))
        };

        // Z targets first; Γ may subtract the fitted first-order term
        let z_rows = par::map_range(m_paths, |m| -> Result<(Vec<f64>, usize)> {
            let w = e.weights(k, m)?;
            let (bz, _) = bounds(m);
            let mut hits = 0;
            let y = clipped[m] - centre[m];
            let row = (0..d).map(|i| clip(y * w.w_z[i], bz, &mut hits)).collect();
            Ok((row, hits))
        });
        let mut columns = vec![vec![0.0; m_paths]; d + n_gamma];
        for (m, r) in z_rows.into_iter().enumerate() {
            let (row, h_m) = r?;
            hits += h_m;
            for (c, v) in row.into_iter().enumerate() {
                columns[c][m] = v;
            }
        }
        let z_refs: Vec<&[f64]> = columns[..d].iter().map(|c| c.as_slice()).collect();
        let alpha_z = ls.solve(&z_refs);
        let cv = self.config.control_variate;
        let g_rows = par::map_range(m_paths, |m| -> Result<(Vec<f64>, usize)> {
            let w = e.weights(k, m)?;
            let (_, bg) = bounds(m);
            let mut hits = 0;
            let mut y = clipped[m] - centre[m];
            if cv {
                let row = design.row(m);
                let sdw = e.sigma0(k, m) * Vector::from_column_slice(e.dw(k, m));
                for (i, a) in alpha_z.iter().enumerate() {
                    y -= row.iter().zip(a).map(|(p, c)| p * c).sum::<f64>() * sdw[i];
                }
            }
            let mut out = Vec::with_capacity(n_gamma);
            for i in 0..d {
                for j in i..d {
                    out.push(clip(y * w.w_gamma[(i, j)], bg, &mut hits));
                }
            }
            Ok((out, hits))
        });
        for (m, r) in g_rows.into_iter().enumerate() {
            let (row, h_m) = r?;
            hits += h_m;
            for (c, v) in row.into_iter().enumerate() {
                columns[d + c][m] = v;
            }
        }
        let g_refs: Vec<&[f64]> = columns[d..].iter().map(|c| c.as_slice()).collect();
        let alpha_gamma = ls.solve(&g_refs);
        if alpha_z.iter().chain(&alpha_gamma).flatten().any(|v| !v.is_finite()) {
            return Err(Error::Regression { step: k });
        }

        let raw = self.config.derivatives == DerivativeSource::Raw;
        let driven = par::map_range(m_paths, |m| -> Result<(f64, usize)> {
            let (z, g) = if raw {
                let z = Vector::from_iterator(d, (0..d).map(|i| columns[i][m]));
                let mut g = Matrix::zeros(d, d);
                let mut idx = d;
                for i in 0..d {
                    for j in i..d {
                        g[(i, j)] = columns[idx][m];
                        g[(j, i)] = columns[idx][m];
                        idx += 1;
                    }
                }
                (z, g)
            } else {
                let row = design.row(m);
                let dot = |a: &[f64]| row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
                let z = Vector::from_iterator(d, alpha_z.iter().map(|a| dot(a)));
                let mut g = Matrix::zeros(d, d);
                let mut idx = 0;
                for i in 0..d {
                    for j in i..d {
                        let v = dot(&alpha_gamma[idx]);
                        g[(i, j)] = v;
                        g[(j, i)] = v;
                        idx += 1;
                    }
                }
                (z, g)
            };
            let input = DriverInput { t_index: k, x: e.x(k, m), s: e.s(k, m), gamma: &g, z: &z };
            let out = driver_g(self.lift, h, &input)?;
            Ok((out.value, out.argmax))
        });
        let mut g = Vec::with_capacity(m_paths);
        let mut argmax_counts = vec![0u64; self.lift.controls().len()];
        for r in driven {
            let (v, j) = r?;
            g.push(v);
            argmax_counts[j] += 1;
        }
        let next_base: Vec<f64> = base.iter().zip(&g).map(|(b, gv)| b + h * gv).collect();
        let mut y_target = next_base.clone();
        hits += truncate_targets(&mut y_target, bound_y);
        let alpha_y = ls.solve(&[&y_target]).remove(0);
        if alpha_y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Regression { step: k });
        }
        let y: Vec<f64> = par::map_range(m_paths, |m| design.predict(m, &alpha_y));
        let residual_y = rms_residual(&design, &alpha_y, &y_target);
        let fit = StepFit {
            k,
            basis,
            alpha_y,
            alpha_z,
            alpha_gamma,
            residual_y,
            condition: ls.condition,
            ridge: ls.ridge,
            truncation_hits: hits,
            argmax_counts,
        };
        Ok((StepOutput { y, g, fit }, next_base))
    }
}

fn bound_from(config: &RegressionConfig, terminal: &[f64]) -> f64 {
    let max_abs = terminal.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if config.truncation.enabled && max_abs > 0.0 {
        config.truncation.growth * max_abs
    } else {
        f64::INFINITY
    }
}

/// First projection scheme at step `k`: `Ẑ_k`, `Γ̂_k` regress `Ŷ_{k+1} · w`,
/// then `Ŷ_k` regresses `Ŷ_{k+1} + h Ḡ(t_k, x, s, Γ̂_k, Ẑ_k)`.
pub fn scheme1_step(
    lift: &MarkovLift,
    ensemble: &Ensemble,
    k: usize,
    y_next: &[f64],
    config: &RegressionConfig,
    terminal: &[f64],
) -> Result<StepOutput> {
    let ctx = StepContext { lift, ensemble, config, bound_y: bound_from(config, terminal) };
    Ok(ctx.step(k, y_next)?.0)
}

/// Second projection scheme at step `k`. `cumulative_next` holds
/// `Ŷ_T + Σ_{i=k+1}^{n−1} h Ḡ_i` per path; all three regressions target it
/// (with `h Ḡ_k` added for `Ŷ_k`). Also returns the updated cumulative sum.
pub fn scheme2_step(
    lift: &MarkovLift,
    ensemble: &Ensemble,
    k: usize,
    cumulative_next: &[f64],
    config: &RegressionConfig,
    terminal: &[f64],
) -> Result<(StepOutput, Vec<f64>)> {
    let ctx = StepContext { lift, ensemble, config, bound_y: bound_from(config, terminal) };
    ctx.step(k, cumulative_next)
}

/// Output of a full regression solve.
pub struct RegressionRun {
    pub y0: f64,
    /// `Φ + h Σ_k Ḡ_k` per path; the bootstrap resamples these.
    pub path_values: Vec<f64>,
    pub fits: Vec<StepFit>,
}

pub(crate) fn solve(lift: &MarkovLift, ensemble: &Ensemble, config: &RegressionConfig) -> Result<RegressionRun> {
    let n = ensemble.steps();
    let terminal = ensemble.terminal_values(lift);
    if terminal.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation { what: "terminal reward", control: 0 });
    }
    let ctx = StepContext { lift, ensemble, config, bound_y: bound_from(config, &terminal) };
    let mut base = terminal.clone();
    let mut path_values = terminal.clone();
    let mut fits = Vec::with_capacity(n);
    let mut y0 = f64::NAN;
    for k in (0..n).rev() {
        let (out, cumulative) = ctx.step(k, &base)?;
        for (p, g) in path_values.iter_mut().zip(&out.g) {
            *p += ensemble.h() * g;
        }
        if k == 0 {
            // X_0 is deterministic, so the step-0 fit reduces to a sample mean
            y0 = par::sum_range(out.y.len(), |m| out.y[m]) / out.y.len() as f64;
        }
        base = match config.scheme {
            ProjectionScheme::One => out.y,
            ProjectionScheme::Two => cumulative,
        };
        fits.push(out.fit);
    }
    fits.reverse();
    if !y0.is_finite() {
        return Err(Error::Regression { step: 0 });
    }
    Ok(RegressionRun { y0, path_values, fits })
}

//! Batch runs over `(n, ε)`: configuration, gating, solving and reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::degenerate::{linear_fit, perturb, perturb_with_ref, RefVol};
use crate::error::{Error, Result};
use crate::kernel::WellPosedness;
use crate::model::MarkovLift;
use crate::par;
use crate::problems::{builtin, Builtin};
use crate::regression::{BasisSpec, ProjectionScheme, RegressionConfig};
use crate::scheme::oracle::OracleConfig;
use crate::scheme::{backward_induction, gate, Engine, SchemeConfig};

/// Fixed CSV header.
pub const CSV_COLUMNS: [&str; 12] =
    ["problem", "n", "h", "eps", "engine", "y0", "stderr", "m_g", "h_0", "seconds", "trunc_hits", "override"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    Oracle,
    Regress1,
    Regress2,
}

impl FromStr for EngineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(EngineKind::Oracle),
            "regress1" => Ok(EngineKind::Regress1),
            "regress2" => Ok(EngineKind::Regress2),
            other => Err(Error::Config(format!("unknown engine `{other}` (oracle, regress1, regress2)"))),
        }
    }
}

impl FromStr for BasisSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parse = |rest: &str| rest.parse::<usize>().map_err(|_| Error::Config(format!("bad basis `{s}`")));
        if let Some(rest) = s.strip_prefix("poly") {
            Ok(BasisSpec::Polynomial { degree: parse(rest)? })
        } else if let Some(rest) = s.strip_prefix("hinge") {
            Ok(BasisSpec::Hinge { knots: parse(rest)? })
        } else {
            Err(Error::Config(format!("unknown basis `{s}` (polyN or hingeN)")))
        }
    }
}

/// Everything a batch run needs. Parsed from a flat `key = value` file whose
/// keys are the field names; list values are comma separated.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub problem: String,
    pub n: Vec<usize>,
    pub paths: usize,
    pub basis: BasisSpec,
    pub engine: EngineKind,
    pub seed: u64,
    pub perturb_eps: Vec<f64>,
    /// Where the report goes; not echoed, so the report is independent of it.
    #[serde(skip)]
    pub out: Option<PathBuf>,
    pub allow_h_override: bool,
    /// Worker count; results do not depend on it, so it is not echoed.
    #[serde(skip)]
    pub threads: Option<usize>,
    /// Record wall time; off by default so reports are byte-stable.
    pub timing: bool,
    pub analytic_mg: Option<f64>,
    pub oracle_nodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            problem: "bs-call".into(),
            n: vec![8, 16, 32],
            paths: 10_000,
            basis: BasisSpec::default(),
            engine: EngineKind::Oracle,
            seed: 0,
            perturb_eps: Vec::new(),
            out: None,
            allow_h_override: false,
            threads: None,
            timing: false,
            analytic_mg: None,
            oracle_nodes: OracleConfig::default().x_nodes,
        }
    }
}

fn list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<T>().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`"))))
        .collect()
}

fn one<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "problem" => self.problem = value.to_string(),
            "n" => self.n = list(key, value)?,
            "paths" => self.paths = one(key, value)?,
            "basis" => self.basis = value.parse()?,
            "engine" => self.engine = value.parse()?,
            "seed" => self.seed = one(key, value)?,
            "perturb_eps" => self.perturb_eps = list(key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            "allow_h_override" => self.allow_h_override = one(key, value)?,
            "threads" => self.threads = Some(one(key, value)?),
            "timing" => self.timing = one(key, value)?,
            "analytic_mg" => self.analytic_mg = Some(one(key, value)?),
            "oracle_nodes" => self.oracle_nodes = one(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a config file body; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n.is_empty() || self.n.contains(&0) {
            return Err(Error::Config("n must be a nonempty list of positive integers".into()));
        }
        if self.perturb_eps.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return Err(Error::Config("perturb_eps values must be positive".into()));
        }
        if self.engine != EngineKind::Oracle && self.paths < 2 {
            return Err(Error::Config("paths must be at least 2".into()));
        }
        if self.oracle_nodes < 2 {
            return Err(Error::Config("oracle_nodes must be at least 2".into()));
        }
        Ok(())
    }

    fn engine(&self) -> Engine {
        match self.engine {
            EngineKind::Oracle => Engine::Oracle(OracleConfig { x_nodes: self.oracle_nodes, ..OracleConfig::default() }),
            EngineKind::Regress1 | EngineKind::Regress2 => Engine::Regression(RegressionConfig {
                scheme: if self.engine == EngineKind::Regress1 { ProjectionScheme::One } else { ProjectionScheme::Two },
                basis: self.basis,
                ..RegressionConfig::default()
            }),
        }
    }

    fn scheme(&self, n: usize) -> SchemeConfig {
        SchemeConfig {
            paths: self.paths,
            seed: self.seed,
            allow_h_override: self.allow_h_override,
            analytic_mg: self.analytic_mg,
            ..SchemeConfig::new(n, self.engine())
        }
    }
}

/// One solved `(n, ε)` cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRow {
    pub problem: String,
    pub n: usize,
    pub h: f64,
    /// 0 when the problem is solved unperturbed.
    pub eps: f64,
    pub engine: String,
    pub y0: f64,
    pub stderr: f64,
    pub m_g: f64,
    pub h_0: f64,
    pub seconds: f64,
    pub trunc_hits: usize,
    /// The row needed the step-size override and is not conforming.
    #[serde(rename = "override")]
    pub over: bool,
    pub argmax_histogram: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub version: String,
    pub config: RunConfig,
    pub rows: Vec<RunRow>,
}

fn num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

impl RunReport {
    pub fn to_csv(&self) -> String {
        let mut out = CSV_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.problem,
                r.n,
                num(r.h),
                num(r.eps),
                r.engine,
                num(r.y0),
                num(r.stderr),
                num(r.m_g),
                num(r.h_0),
                num(r.seconds),
                r.trunc_hits,
                u8::from(r.over)
            );
        }
        out
    }

    /// JSON mirror of the CSV with the argmax histograms and the config echo.
    /// Non-finite numbers appear as `null`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }

    /// Writes `path` and `path` with a `.json` extension, each through a
    /// temporary file so a failed run leaves nothing behind.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv())?;
        write_atomic(&path.with_extension("json"), &self.to_json())
    }
}

fn write_atomic(path: &Path, body: &str) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, body)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// The problems of one run, one per `ε` (or the base problem alone).
pub struct Instances {
    pub builtin: Builtin,
    pub cells: Vec<(f64, MarkovLift)>,
}

/// Resolves the builtin and perturbs it for each `ε`.
pub fn instances(config: &RunConfig) -> Result<Instances> {
    let b = builtin(&config.problem)?;
    if config.perturb_eps.is_empty() {
        if b.degenerate {
            return Err(Error::Config(format!(
                "problem `{}` has degenerate volatility; pass perturb_eps",
                config.problem
            )));
        }
        let lift = b.lift.clone();
        return Ok(Instances { builtin: b, cells: vec![(0.0, lift)] });
    }
    let mut cells = Vec::new();
    for &e in &config.perturb_eps {
        let p = match &b.perturbed_ref_vol {
            Some(f) => perturb_with_ref(&b.lift, e, RefVol::constant(f(e)))?,
            None => perturb(&b.lift, e)?,
        };
        cells.push((e, p.lift));
    }
    Ok(Instances { builtin: b, cells })
}

/// Gates every `(n, ε)` cell, then solves them in order. Nothing is
/// returned (or written) unless every cell succeeds.
pub fn run(config: &RunConfig) -> Result<RunReport> {
    config.validate()?;
    par::with_threads(config.threads, || run_inner(config))
}

fn run_inner(config: &RunConfig) -> Result<RunReport> {
    let inst = instances(config)?;
    let mut gated: Vec<(f64, &MarkovLift, usize, WellPosedness, bool)> = Vec::new();
    for (e, lift) in &inst.cells {
        for &n in &config.n {
            let sc = config.scheme(n);
            if let Engine::Regression(rc) = &sc.engine {
                let size = rc.basis.size(lift.dim_x() + lift.dim_s());
                if config.paths < size {
                    return Err(Error::Config(format!("paths = {} is below the basis size {size}", config.paths)));
                }
            }
            let (wp, conforming) = gate(lift, &sc)?;
            gated.push((*e, lift, n, wp, conforming));
        }
    }
    let mut rows = Vec::with_capacity(gated.len());
    for (e, lift, n, _, _) in gated {
        let sc = config.scheme(n);
        let start = Instant::now();
        let r = backward_induction(lift, &sc)?;
        let seconds = if config.timing { start.elapsed().as_secs_f64() } else { 0.0 };
        rows.push(RunRow {
            problem: config.problem.clone(),
            n,
            h: r.h,
            eps: e,
            engine: r.engine.clone(),
            y0: r.y0,
            stderr: r.stderr,
            m_g: r.well_posedness.m_g,
            h_0: r.well_posedness.h0,
            seconds,
            trunc_hits: r.truncation_hits,
            over: !r.conforming,
            argmax_histogram: r.argmax_counts.clone(),
        });
    }
    Ok(RunReport { version: env!("CARGO_PKG_VERSION").into(), config: config.clone(), rows })
}

/// Process exit code for an error: 2 for the well-posedness gate, 3 for
/// numerical failures, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_gate() {
        2
    } else if e.is_numerical() {
        3
    } else {
        1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyRow {
    pub n: usize,
    pub h: f64,
    pub y0: f64,
    pub stderr: f64,
    pub error: f64,
    /// The error grew by more than the combined stderr since the previous row.
    pub non_monotone: bool,
}

/// Error ladder against a reference value with the fitted log–log slope.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyReport {
    pub problem: String,
    pub reference: f64,
    pub reference_source: String,
    pub rows: Vec<StudyRow>,
    /// Least-squares slope of `ln |error|` against `ln h`. Empirical only:
    /// the `h^{1/8}` rate is a worst-case bound, not a prediction.
    pub empirical_slope: f64,
    pub theoretical_rate: f64,
}

impl StudyReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("# problem {} reference {} ({})\n", self.problem, self.reference, self.reference_source);
        out.push_str("n,h,y0,stderr,abs_error,flag\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.n,
                num(r.h),
                num(r.y0),
                num(r.stderr),
                num(r.error),
                if r.non_monotone { "non-monotone" } else { "" }
            );
        }
        let _ = writeln!(
            out,
            "# empirical slope {:.4} (observed only); worst-case bound rate {}",
            self.empirical_slope, self.theoretical_rate
        );
        out
    }
}

/// Runs the `n` ladder of `config` and compares with the closed form when the
/// problem has one, or else with the oracle at four times the finest `n`.
pub fn convergence_study(config: &RunConfig) -> Result<StudyReport> {
    if config.n.len() < 4 {
        return Err(Error::Config("a convergence study needs at least four ladder points".into()));
    }
    let report = run(config)?;
    let b = builtin(&config.problem)?;
    let (reference, source) = match (b.reference, config.perturb_eps.is_empty()) {
        (Some(v), true) => (v, "closed form".to_string()),
        _ => {
            let finest = 4 * config.n.iter().max().copied().unwrap_or(1);
            let mut fine = config.clone();
            fine.n = vec![finest];
            fine.engine = EngineKind::Oracle;
            fine.perturb_eps.truncate(1);
            let r = run(&fine)?;
            (r.rows[0].y0, format!("oracle at n = {finest}"))
        }
    };
    let mut rows: Vec<StudyRow> = report
        .rows
        .iter()
        .map(|r| StudyRow { n: r.n, h: r.h, y0: r.y0, stderr: r.stderr, error: (r.y0 - reference).abs(), non_monotone: false })
        .collect();
    rows.sort_by_key(|r| r.n);
    for i in 1..rows.len() {
        let slack = rows[i].stderr + rows[i - 1].stderr;
        rows[i].non_monotone = rows[i].error > rows[i - 1].error + slack;
    }
    let pts: Vec<(f64, f64)> = rows.iter().filter(|r| r.error > 0.0).map(|r| (r.h.ln(), r.error.ln())).collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    let slope = if xs.len() >= 2 { linear_fit(&xs, &ys).1 } else { f64::NAN };
    Ok(StudyReport {
        problem: config.problem.clone(),
        reference,
        reference_source: source,
        rows,
        empirical_slope: slope,
        theoretical_rate: 0.125,
    })
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use pathctl::run::{convergence_study, exit_code, run, RunConfig};
use pathctl::Error;

/// Solve builtin control problems with the backward scheme and write CSV/JSON reports.
///
/// Exit codes: 0 success, 2 well-posedness gate (h > h0 or assumption
/// violated), 3 numerical failure, 1 anything else.
#[derive(Parser, Debug)]
#[command(name = "pathctl", version)]
struct Cli {
    /// Flat `key = value` config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// bs-call, uvm-call, call-sharpe, asian-lift or linear-martingale.
    #[arg(long)]
    problem: Option<String>,
    /// Comma-separated list of step counts.
    #[arg(long)]
    n: Option<String>,
    /// Monte Carlo paths for the regression engines.
    #[arg(long)]
    paths: Option<usize>,
    /// oracle, regress1 or regress2.
    #[arg(long)]
    engine: Option<String>,
    /// Regression basis: polyN or hingeN.
    #[arg(long)]
    basis: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated perturbation sizes for degenerate volatility.
    #[arg(long)]
    perturb_eps: Option<String>,
    /// CSV output path; the JSON mirror goes next to it. Without it the CSV is printed.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run even when h > h0 or the assumption fails; rows are marked in the `override` column.
    #[arg(long)]
    allow_h_override: bool,
    /// Worker threads (results do not depend on this).
    #[arg(long)]
    threads: Option<usize>,
    /// Fill the `seconds` column with wall time.
    #[arg(long)]
    timing: bool,
    /// Run a convergence study over the n ladder instead of a plain run.
    #[arg(long)]
    study: bool,
    /// Analytic m_G replacing the probe estimate.
    #[arg(long, allow_hyphen_values = true)]
    analytic_mg: Option<f64>,
    /// Oracle lattice size.
    #[arg(long)]
    oracle_nodes: Option<usize>,
}

fn config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let text = [
        ("problem", &cli.problem),
        ("n", &cli.n),
        ("engine", &cli.engine),
        ("basis", &cli.basis),
        ("perturb_eps", &cli.perturb_eps),
    ];
    for (k, v) in text {
        if let Some(v) = v {
            c.set(k, v)?;
        }
    }
    if let Some(v) = cli.paths {
        c.paths = v;
    }
    if let Some(v) = cli.seed {
        c.seed = v;
    }
    if let Some(v) = &cli.out {
        c.out = Some(v.clone());
    }
    if let Some(v) = cli.threads {
        c.threads = Some(v);
    }
    if let Some(v) = cli.analytic_mg {
        c.analytic_mg = Some(v);
    }
    if let Some(v) = cli.oracle_nodes {
        c.oracle_nodes = v;
    }
    c.allow_h_override |= cli.allow_h_override;
    c.timing |= cli.timing;
    Ok(c)
}

fn execute(cli: &Cli) -> Result<(), Error> {
    let c = config(cli)?;
    if cli.study {
        let study = convergence_study(&c)?;
        let text = study.to_text();
        match &c.out {
            Some(p) => std::fs::write(p, text)?,
            None => print!("{text}"),
        }
        return Ok(());
    }
    let report = run(&c)?;
    match &c.out {
        Some(p) => report.write(p)?,
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("pathctl: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}

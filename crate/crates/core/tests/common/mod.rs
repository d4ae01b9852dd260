//! Test-only reference solvers.
#![allow(dead_code)]

/// Crank–Nicolson solve of `V_τ = ½ Σ(V_SS) S² V_SS` on `[0, s_max]` with
/// `Σ = var_hi` where the discrete gamma is nonnegative and `var_lo`
/// elsewhere. Dirichlet boundaries take the payoff; the first steps are
/// fully implicit to damp the payoff kink. The policy is iterated to a fixed
/// point at every step.
pub fn bsb_price(
    payoff: impl Fn(f64) -> f64,
    s0: f64,
    horizon: f64,
    var_lo: f64,
    var_hi: f64,
    s_max: f64,
    nodes: usize,
    steps: usize,
) -> f64 {
    let ds = s_max / (nodes - 1) as f64;
    let s: Vec<f64> = (0..nodes).map(|i| i as f64 * ds).collect();
    let mut v: Vec<f64> = s.iter().map(|&x| payoff(x)).collect();
    let (left, right) = (v[0], v[nodes - 1]);
    let dt = horizon / steps as f64;
    let gamma = |v: &[f64], i: usize| v[i - 1] - 2.0 * v[i] + v[i + 1];
    let mut var = vec![var_hi; nodes];
    let rannacher = 4;
    let mut sub = Vec::new();
    for m in 0..steps {
        if m < rannacher / 2 {
            sub.push((0.5 * dt, 1.0));
            sub.push((0.5 * dt, 1.0));
        } else {
            sub.push((dt, 0.5));
        }
    }
    for (dt, theta) in sub {
        let old = v.clone();
        for i in 1..nodes - 1 {
            var[i] = if gamma(&old, i) >= 0.0 { var_hi } else { var_lo };
        }
        for _ in 0..50 {
            let alpha: Vec<f64> = (0..nodes).map(|i| 0.5 * var[i] * s[i] * s[i] / (ds * ds)).collect();
            // tridiagonal (a, b, c) x = d on interior nodes
            let n = nodes - 2;
            let (mut a, mut b, mut c, mut d) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for k in 0..n {
                let i = k + 1;
                a[k] = -theta * dt * alpha[i];
                b[k] = 1.0 + 2.0 * theta * dt * alpha[i];
                c[k] = -theta * dt * alpha[i];
                d[k] = old[i] + (1.0 - theta) * dt * alpha[i] * gamma(&old, i);
            }
            d[0] -= a[0] * left;
            d[n - 1] -= c[n - 1] * right;
            for k in 1..n {
                let w = a[k] / b[k - 1];
                b[k] -= w * c[k - 1];
                d[k] -= w * d[k - 1];
            }
            let mut x = vec![0.0; n];
            x[n - 1] = d[n - 1] / b[n - 1];
            for k in (0..n - 1).rev() {
                x[k] = (d[k] - c[k] * x[k + 1]) / b[k];
            }
            let mut next = old.clone();
            next[1..nodes - 1].copy_from_slice(&x);
            next[0] = left;
            next[nodes - 1] = right;
            let mut changed = false;
            for i in 1..nodes - 1 {
                let g = theta * gamma(&next, i) + (1.0 - theta) * gamma(&old, i);
                let want = if g >= 0.0 { var_hi } else { var_lo };
                if want != var[i] {
                    var[i] = want;
                    changed = true;
                }
            }
            v = next;
            if !changed {
                break;
            }
        }
    }
    let i = ((s0 / ds).floor() as usize).min(nodes - 2);
    let w = (s0 - s[i]) / ds;
    (1.0 - w) * v[i] + w * v[i + 1]
}

use std::sync::Arc;

use pathctl::linalg::Vector;
use pathctl::model::{diag, ControlGrid, LatticeHint, MarkovLift};
use pathctl::problems::{markov_problem, MarkovCoefficients};

/// Bull call spread long `k1`, short `k2`.
pub fn call_spread(k1: f64, k2: f64) -> impl Fn(f64) -> f64 + Copy + Send + Sync + 'static {
    move |s| (s - k1).max(0.0) - (s - k2).max(0.0)
}

/// `dS = √u S dW`, `u` on a variance grid, with a call-spread payoff.
pub fn uvm_spread(var_lo: f64, var_hi: f64, points: usize, ref_var: f64, k1: f64, k2: f64) -> MarkovLift {
    let payoff = call_spread(k1, k2);
    let w = 8.0 * var_hi.sqrt();
    markov_problem(MarkovCoefficients {
        horizon: 1.0,
        x0: vec![100.0],
        controls: ControlGrid::linspace(var_lo, var_hi, points).unwrap(),
        drift: Arc::new(|_, _, _| Vector::zeros(1)),
        vol: Arc::new(|_, x, u| diag(&[u.value().sqrt() * x[0]])),
        running_reward: Arc::new(|_, _, _| 0.0),
        terminal_reward: Arc::new(move |x| payoff(x[0])),
        ref_vol: Arc::new(move |_, x| diag(&[ref_var.sqrt() * x[0]])),
        eps0: 1e-300,
        hint: Some(LatticeHint { lo: 100.0 * (-w).exp(), hi: 100.0 * w.exp(), geometric: true }),
    })
    .unwrap()
}

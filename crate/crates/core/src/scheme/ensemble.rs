use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kernel::{gaussian_weights, GaussianWeights};
use crate::linalg::{Matrix, Vector};
use crate::model::MarkovLift;
use crate::par;

/// Simulated reference paths `X⁰` with their companion states, Brownian
/// increments and the reference volatility used on each step.
///
/// Storage is step-major: entry `(k, m)` of every array is contiguous in `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    n: usize,
    paths: usize,
    h: f64,
    horizon: f64,
    dim_x: usize,
    dim_s: usize,
    x: Vec<f64>,
    s: Vec<f64>,
    dw: Vec<f64>,
    sigma0: Vec<f64>,
}

struct PathRecord {
    x: Vec<f64>,
    s: Vec<f64>,
    dw: Vec<f64>,
    sigma0: Vec<f64>,
}

/// `M` independent reference paths `X⁰_{k+1} = X⁰_k + σ₀ ΔW_{k+1}`.
///
/// Path `m` draws from its own ChaCha8 stream `m` of `seed`, so the ensemble
/// is a function of `(seed, M, n)` only.
pub fn simulate_reference(lift: &MarkovLift, n: usize, paths: usize, seed: u64) -> Result<Ensemble> {
    if n == 0 || paths == 0 {
        return Err(Error::Config(format!("need n ≥ 1 and M ≥ 1, got n = {n}, M = {paths}")));
    }
    let d = lift.dim_x();
    let ds = lift.dim_s();
    let h = lift.horizon() / n as f64;
    let sq = h.sqrt();
    let records = par::map_range(paths, |m| -> Result<PathRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(m as u64);
        let mut rec = PathRecord {
            x: Vec::with_capacity((n + 1) * d),
            s: Vec::with_capacity((n + 1) * ds),
            dw: Vec::with_capacity(n * d),
            sigma0: Vec::with_capacity(n * d * d),
        };
        let mut x = lift.x0().to_vec();
        let mut s = lift.s0().to_vec();
        rec.x.extend_from_slice(&x);
        rec.s.extend_from_slice(&s);
        for k in 0..n {
            let t = k as f64 * h;
            let sigma0 = lift.ref_vol(t, &x, &s);
            if sigma0.iter().any(|v| !v.is_finite()) {
                return Err(Error::Evaluation { what: "reference volatility", control: 0 });
            }
            let dw = Vector::from_iterator(d, (0..d).map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * sq
            }));
            let next = Vector::from_column_slice(&x) + &sigma0 * &dw;
            rec.sigma0.extend(sigma0.iter());
            rec.dw.extend(dw.iter());
            s = lift.update(&s, next.as_slice(), h);
            x = next.as_slice().to_vec();
            rec.x.extend_from_slice(&x);
            rec.s.extend_from_slice(&s);
        }
        Ok(rec)
    });
    let mut e = Ensemble {
        n,
        paths,
        h,
        horizon: lift.horizon(),
        dim_x: d,
        dim_s: ds,
        x: vec![0.0; (n + 1) * paths * d],
        s: vec![0.0; (n + 1) * paths * ds],
        dw: vec![0.0; n * paths * d],
        sigma0: vec![0.0; n * paths * d * d],
    };
    for (m, rec) in records.into_iter().enumerate() {
        let rec = rec?;
        for k in 0..=n {
            let dst = (k * paths + m) * d;
            e.x[dst..dst + d].copy_from_slice(&rec.x[k * d..(k + 1) * d]);
            let dst = (k * paths + m) * ds;
            e.s[dst..dst + ds].copy_from_slice(&rec.s[k * ds..(k + 1) * ds]);
            if k < n {
                let dst = (k * paths + m) * d;
                e.dw[dst..dst + d].copy_from_slice(&rec.dw[k * d..(k + 1) * d]);
                let dd = d * d;
                let dst = (k * paths + m) * dd;
                e.sigma0[dst..dst + dd].copy_from_slice(&rec.sigma0[k * dd..(k + 1) * dd]);
            }
        }
    }
    Ok(e)
}

impl Ensemble {
    pub fn steps(&self) -> usize {
        self.n
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n {
            self.horizon
        } else {
            k as f64 * self.h
        }
    }

    pub fn dim_x(&self) -> usize {
        self.dim_x
    }

    pub fn dim_s(&self) -> usize {
        self.dim_s
    }

    /// State dimension seen by the regressions, `d + d′`.
    pub fn state_dim(&self) -> usize {
        self.dim_x + self.dim_s
    }

    pub fn x(&self, k: usize, m: usize) -> &[f64] {
        let i = (k * self.paths + m) * self.dim_x;
        &self.x[i..i + self.dim_x]
    }

    pub fn s(&self, k: usize, m: usize) -> &[f64] {
        let i = (k * self.paths + m) * self.dim_s;
        &self.s[i..i + self.dim_s]
    }

    /// Writes `(x, s)` of path `m` at step `k` into `out`.
    pub fn state_into(&self, k: usize, m: usize, out: &mut [f64]) {
        out[..self.dim_x].copy_from_slice(self.x(k, m));
        out[self.dim_x..].copy_from_slice(self.s(k, m));
    }

    /// Increment `ΔW_{k+1}` driving step `k → k+1`.
    pub fn dw(&self, k: usize, m: usize) -> &[f64] {
        let i = (k * self.paths + m) * self.dim_x;
        &self.dw[i..i + self.dim_x]
    }

    /// `σ₀(t_k, X̂⁰)` on path `m`.
    pub fn sigma0(&self, k: usize, m: usize) -> Matrix {
        let dd = self.dim_x * self.dim_x;
        let i = (k * self.paths + m) * dd;
        Matrix::from_column_slice(self.dim_x, self.dim_x, &self.sigma0[i..i + dd])
    }

    pub fn weights(&self, k: usize, m: usize) -> Result<GaussianWeights> {
        gaussian_weights(&self.sigma0(k, m), &Vector::from_column_slice(self.dw(k, m)), self.h)
    }

    /// `Φ̄(x_n, s_n)` on every path.
    pub fn terminal_values(&self, lift: &MarkovLift) -> Vec<f64> {
        par::map_range(self.paths, |m| lift.terminal_reward(self.x(self.n, m), self.s(self.n, m)))
    }
}

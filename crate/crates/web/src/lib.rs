//! Browser bindings: the one-step density, an uncertain-volatility price and
//! the Black–Scholes error ladder. Each export wraps a plain function that
//! the host tests call directly.

use pathctl::kernel::{density_eval, min_factor, step_mg, SamplerCache, StepDensityParams};
use pathctl::linalg::Vector;
use pathctl::problems::{black_scholes_call, bs_call, uvm_call, CallParams};
use pathctl::scheme::{backward_induction, Engine, OracleConfig, SchemeConfig};
use wasm_bindgen::prelude::*;

fn js(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Curve of `f_h` on `points` nodes over ±5 standard deviations, with the
/// sampler's histogram of `draws` stratified uniforms on the same bins.
/// Layout: `[h0, min factor, x…, f…, hist…]`.
pub fn density_curve(a0: f64, a_u: f64, b: f64, h: f64, points: usize, draws: usize) -> Result<Vec<f64>, String> {
    if !(a0 > 0.0 && h > 0.0) || points < 2 {
        return Err("need a0 > 0, h > 0 and at least two points".into());
    }
    let p = StepDensityParams::scalar(a0, a_u, b, h);
    let (factor, _) = min_factor(&p).map_err(|e| e.to_string())?;
    let cf = p.constant_factor().map_err(|e| e.to_string())?;
    let m = step_mg(&p);
    let h0 = if a_u < 0.0 || cf < 0.0 || m == f64::NEG_INFINITY {
        0.0
    } else if m == 0.0 {
        f64::INFINITY
    } else {
        cf / -m
    };
    let sd = ((a0 + a_u.max(0.0)) * h).sqrt();
    let (lo, hi) = (b * h - 5.0 * sd, b * h + 5.0 * sd);
    let dx = (hi - lo) / (points - 1) as f64;
    let xs: Vec<f64> = (0..points).map(|i| lo + dx * i as f64).collect();
    let fs = xs
        .iter()
        .map(|&x| density_eval(&p, &Vector::from_element(1, x)))
        .collect::<Result<Vec<f64>, _>>()
        .map_err(|e| e.to_string())?;
    let mut hist = vec![0.0; points];
    if draws > 0 && factor >= 0.0 {
        let sampler = SamplerCache::new().get(&p).map_err(|e| e.to_string())?;
        for i in 0..draws {
            let x = sampler.quantile((i as f64 + 0.5) / draws as f64);
            let bin = ((x - lo) / dx + 0.5).floor();
            if bin >= 0.0 && (bin as usize) < points {
                hist[bin as usize] += 1.0 / (draws as f64 * dx);
            }
        }
    }
    let mut out = vec![h0, factor];
    out.extend(xs);
    out.extend(fs);
    out.extend(hist);
    Ok(out)
}

/// Oracle price of an at-the-money call when the variance ranges over
/// `points` values in `[var_lo, var_hi]`. Layout:
/// `[y0, BS at √var_hi, m_G, h0, conforming, share of each control…]`.
pub fn uvm_price(var_lo: f64, var_hi: f64, points: usize, ref_var: f64, n: usize, allow_override: bool) -> Result<Vec<f64>, String> {
    let p = CallParams::default();
    let lift = uvm_call(p, var_lo, var_hi, points, ref_var).map_err(|e| e.to_string())?;
    let mut config = SchemeConfig::new(n, Engine::Oracle(OracleConfig { x_nodes: 401, ..OracleConfig::default() }));
    config.allow_h_override = allow_override;
    let r = backward_induction(&lift, &config).map_err(|e| e.to_string())?;
    let mut out = vec![
        r.y0,
        black_scholes_call(p.s0, p.strike, var_hi.sqrt(), p.horizon),
        r.well_posedness.m_g,
        r.well_posedness.h0,
        f64::from(u8::from(r.conforming)),
    ];
    out.extend(r.argmax_frequencies());
    Ok(out)
}

/// `[n, y0, |y0 − BS|]` triples for `n = 4, 8, …, max_n`.
pub fn bs_ladder(sigma: f64, max_n: usize) -> Result<Vec<f64>, String> {
    let p = CallParams::default();
    let lift = bs_call(p, sigma).map_err(|e| e.to_string())?;
    let exact = black_scholes_call(p.s0, p.strike, sigma, p.horizon);
    let mut out = Vec::new();
    let mut n = 4;
    while n <= max_n.min(256) {
        let config = SchemeConfig::new(n, Engine::Oracle(OracleConfig { x_nodes: 401, ..OracleConfig::default() }));
        let r = backward_induction(&lift, &config).map_err(|e| e.to_string())?;
        out.extend([n as f64, r.y0, (r.y0 - exact).abs()]);
        n *= 2;
    }
    Ok(out)
}

#[wasm_bindgen(js_name = densityCurve)]
pub fn density_curve_js(a0: f64, a_u: f64, b: f64, h: f64, points: usize, draws: usize) -> Result<Vec<f64>, JsValue> {
    density_curve(a0, a_u, b, h, points, draws).map_err(js)
}

#[wasm_bindgen(js_name = uvmPrice)]
pub fn uvm_price_js(var_lo: f64, var_hi: f64, points: usize, ref_var: f64, n: usize, allow_override: bool) -> Result<Vec<f64>, JsValue> {
    uvm_price(var_lo, var_hi, points, ref_var, n, allow_override).map_err(js)
}

#[wasm_bindgen(js_name = bsLadder)]
pub fn bs_ladder_js(sigma: f64, max_n: usize) -> Result<Vec<f64>, JsValue> {
    bs_ladder(sigma, max_n).map_err(js)
}

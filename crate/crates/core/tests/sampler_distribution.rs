use pathctl::kernel::{density_eval, SamplerCache, StepDensityParams};
use pathctl::linalg::Vector;
use pathctl::quad::GaussLegendre;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Open01;

/// CDF by direct quadrature of the density.
fn cdf(p: &StepDensityParams, x: f64) -> f64 {
    let sd = (p.a0[(0, 0)] * p.h).sqrt();
    let lo = -16.0 * sd;
    if x <= lo {
        return 0.0;
    }
    GaussLegendre::new(20).integrate_pieces(&[lo, x], sd / 4.0, |y| density_eval(p, &Vector::from_element(1, y)).unwrap())
}

#[test]
fn kolmogorov_smirnov_against_quadrature_cdf() {
    for (a0, a_u, b, h) in [(1.0, 0.5, 0.5, 0.25), (0.04, 0.05, 0.0, 0.1), (2.0, 0.0, 0.0, 1.0)] {
        let p = StepDensityParams::scalar(a0, a_u, b, h);
        let sampler = SamplerCache::new().get(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 20_000;
        let mut xs: Vec<f64> = (0..n).map(|_| sampler.quantile(rng.sample::<f64, _>(Open01))).collect();
        xs.sort_by(f64::total_cmp);
        // cumulative quadrature across the sorted sample
        let gl = GaussLegendre::new(20);
        let sd = (a0 * h).sqrt();
        let (mut f, mut prev, mut d) = (cdf(&p, xs[0]), xs[0], 0.0f64);
        for (i, &x) in xs.iter().enumerate() {
            f += gl.integrate_pieces(&[prev, x], sd / 4.0, |y| density_eval(&p, &Vector::from_element(1, y)).unwrap());
            prev = x;
            d = d.max((f - i as f64 / n as f64).abs()).max(((i + 1) as f64 / n as f64 - f).abs());
        }
        // 1% critical value of the one-sample statistic
        assert!(d * (n as f64).sqrt() < 1.63, "params {:?}: D = {d}", (a0, a_u, b, h));
    }
}

#[test]
fn sampler_cdf_agrees_with_quadrature() {
    let p = StepDensityParams::scalar(1.0, 0.8, -0.4, 0.3);
    let sampler = SamplerCache::new().get(&p).unwrap();
    for x in [-1.5, -0.4, 0.0, 0.2, 1.1] {
        assert!((sampler.cdf(x) - cdf(&p, x)).abs() < 1e-9, "x = {x}");
    }
}

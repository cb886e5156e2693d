//! Statistical test helpers for the distributional property suites.

use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::erf;

/// One-sample Kolmogorov–Smirnov statistic of `sample` against the CDF `cdf`.
///
/// Sorts a copy of the sample; NaNs are rejected by debug assertion.
pub fn ks_statistic<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("NaN in KS sample"));
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((f - lo).abs()).max((hi - f).abs());
    }
    d
}

/// Critical KS threshold at the 1% level for sample size n (asymptotic).
pub fn ks_threshold_1pct(n: usize) -> f64 {
    1.63 / (n as f64).sqrt()
}

/// CDF of the 3-dimensional Bessel process marginal at time `t` started at 0:
/// density sqrt(2/(pi t^3)) y^2 exp(-y^2/(2t)).
pub fn bessel3_cdf(t: f64, y: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    let s = (2.0 * t).sqrt();
    erf(y / s) - (2.0 / (std::f64::consts::PI * t)).sqrt() * y * (-y * y / (2.0 * t)).exp()
}

/// Density of the 3-dimensional Bessel marginal at time `t`.
pub fn bessel3_pdf(t: f64, y: f64) -> f64 {
    if y <= 0.0 {
        return 0.0;
    }
    (2.0 / (std::f64::consts::PI * t * t * t)).sqrt() * y * y * (-y * y / (2.0 * t)).exp()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Pearson chi-squared test of `sample` in [0,1] against Uniform(0,1) with
/// `n_bins` equiprobable cells. Returns (statistic, dof, p-value).
pub fn chi2_uniform_test(sample: &[f64], n_bins: usize) -> (f64, usize, f64) {
    let mut counts = vec![0usize; n_bins];
    for &u in sample {
        let k = ((u * n_bins as f64) as usize).min(n_bins - 1);
        counts[k] += 1;
    }
    let expected = sample.len() as f64 / n_bins as f64;
    let stat: f64 = counts
        .iter()
        .map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        })
        .sum();
    let dof = n_bins - 1;
    (stat, dof, chi2_pvalue(stat, dof))
}

/// Upper-tail p-value of a chi-squared statistic.
pub fn chi2_pvalue(stat: f64, dof: usize) -> f64 {
    if dof == 0 {
        return 1.0;
    }
    let dist = ChiSquared::new(dof as f64).expect("dof > 0");
    1.0 - dist.cdf(stat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel3_cdf_matches_pdf_quadrature() {
        for &t in &[0.25, 1.0, 2.0] {
            for &y in &[0.3, 1.0, 2.5] {
                let q = crate::num::integrate(&|z| bessel3_pdf(t, z), 0.0, y, 1e-12);
                assert!((q - bessel3_cdf(t, y)).abs() < 1e-10, "t={t} y={y}");
            }
        }
    }

    #[test]
    fn ks_detects_wrong_cdf() {
        // deterministic stratified uniform sample
        let n = 10_000;
        let sample: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let d_ok = ks_statistic(&sample, |x| x.clamp(0.0, 1.0));
        let d_bad = ks_statistic(&sample, |x| x.clamp(0.0, 1.0).powi(2));
        assert!(d_ok < ks_threshold_1pct(n));
        assert!(d_bad > ks_threshold_1pct(n));
    }

    #[test]
    fn chi2_uniform_on_stratified_sample() {
        let n = 50_000;
        let sample: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let (_, _, p) = chi2_uniform_test(&sample, 20);
        assert!(p > 0.99);
    }
}

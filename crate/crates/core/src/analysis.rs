//! Shared numerics: log-log fits, singularity spectra, shuffled surrogates and
//! the synthetic oracle series used to validate both estimators.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on `f(alpha)` allowed by rounding.
pub const SPECTRUM_F_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n_points: usize,
}

/// Ordinary least squares of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<FitResult> {
    if x.len() != y.len() {
        return Err(Error::Domain(format!(
            "fit inputs differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::Insufficient(format!(
            "a fit needs at least 3 points, got {n}"
        )));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (&xi, &yi) in x.iter().zip(y) {
        let dx = xi - mx;
        let dy = yi - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx <= 0.0 {
        return Err(Error::Degenerate("all abscissae coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    } else {
        1.0
    };
    Ok(FitResult {
        slope,
        intercept,
        r2,
        n_points: n,
    })
}

/// Least squares on `(ln s, ln F)`.
pub fn loglog_fit(pairs: &[(f64, f64)]) -> Result<FitResult> {
    if let Some(&(s, f)) = pairs.iter().find(|&&(s, f)| !(s > 0.0 && f > 0.0)) {
        return Err(Error::Domain(format!(
            "log-log fit needs positive values, got ({s}, {f})"
        )));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().map(|&(s, f)| (s.ln(), f.ln())).unzip();
    linear_fit(&x, &y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mfdfa,
    Wtmm,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Mfdfa => "mfdfa",
            Method::Wtmm => "wtmm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPoint {
    pub q: f64,
    pub alpha: f64,
    pub f: f64,
}

/// Singularity spectrum `f(alpha)`, points sorted by `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularitySpectrum {
    pub method: Method,
    pub points: Vec<SpectrumPoint>,
    /// q values dropped on the way (non-finite derivative, non-monotone alpha).
    pub dropped_q: Vec<f64>,
    /// Amount subtracted from every `f` so that `max f <= 1`; zero when the
    /// raw estimate already respects the bound.
    pub f_shift: f64,
}

impl SingularitySpectrum {
    /// Sorts by `alpha` and caps the support dimension at 1 by shifting all
    /// `f` down together.
    pub fn new(method: Method, mut points: Vec<SpectrumPoint>, dropped_q: Vec<f64>) -> Self {
        points.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
        let top = points.iter().map(|p| p.f).fold(f64::NEG_INFINITY, f64::max);
        let f_shift = if top > 1.0 { top - 1.0 } else { 0.0 };
        for p in &mut points {
            p.f -= f_shift;
        }
        Self {
            method,
            points,
            dropped_q,
            f_shift,
        }
    }

    pub fn width(&self) -> f64 {
        spectrum_width(self)
    }

    pub fn alpha_at_max_f(&self) -> Option<f64> {
        self.points
            .iter()
            .max_by(|a, b| a.f.total_cmp(&b.f))
            .map(|p| p.alpha)
    }

    pub fn max_f(&self) -> Option<f64> {
        self.points.iter().map(|p| p.f).max_by(f64::total_cmp)
    }
}

/// `max alpha - min alpha`; zero for fewer than two points.
pub fn spectrum_width(spectrum: &SingularitySpectrum) -> f64 {
    if spectrum.points.len() < 2 {
        return 0.0;
    }
    let (lo, hi) = spectrum
        .points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.alpha), hi.max(p.alpha))
        });
    hi - lo
}

/// Central differences on a (possibly non-uniform) grid, one-sided at the ends.
pub fn finite_difference(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|i| match (i, n) {
            (_, 0 | 1) => f64::NAN,
            (0, _) => (y[1] - y[0]) / (x[1] - x[0]),
            (i, n) if i == n - 1 => (y[i] - y[i - 1]) / (x[i] - x[i - 1]),
            (i, _) => (y[i + 1] - y[i - 1]) / (x[i + 1] - x[i - 1]),
        })
        .collect()
}

/// Uniform random permutation driven by a seeded ChaCha8 generator.
pub fn shuffle(x: &[f64], seed: u64) -> Vec<f64> {
    let mut out = x.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.shuffle(&mut rng);
    out
}

pub const CASCADE_MAX_LEVELS: u32 = 24;

/// Deterministic binomial multiplicative cascade of length `2^levels`: every
/// cell splits into a left child carrying fraction `p` and a right child
/// carrying `1 - p` of its mass.
pub fn gen_binomial_cascade(levels: u32, p: f64) -> Result<Vec<f64>> {
    if !(1..=CASCADE_MAX_LEVELS).contains(&levels) {
        return Err(Error::Config(format!(
            "cascade levels must lie in 1..={CASCADE_MAX_LEVELS}, got {levels}"
        )));
    }
    if !(p > 0.5 && p < 1.0) {
        return Err(Error::Config(format!("cascade p must lie in (0.5, 1), got {p}")));
    }
    let mut cells = vec![1.0];
    for _ in 0..levels {
        cells = cells.iter().flat_map(|&c| [c * p, c * (1.0 - p)]).collect();
    }
    Ok(cells)
}

/// Generalized Hurst exponent of the binomial cascade.
pub fn cascade_hurst(p: f64, q: f64) -> f64 {
    if q == 0.0 {
        // limit q -> 0
        return -0.5 * (p.log2() + (1.0 - p).log2());
    }
    1.0 / q - (p.powf(q) + (1.0 - p).powf(q)).ln() / (q * std::f64::consts::LN_2)
}

/// Mass exponent `tau(q) = -log2(p^q + (1-p)^q)` of the binomial cascade,
/// equal to `q h(q) - 1`.
pub fn cascade_tau(p: f64, q: f64) -> f64 {
    -(p.powf(q) + (1.0 - p).powf(q)).log2()
}

/// Autocovariance of unit-variance fractional Gaussian noise at lag `k`.
pub fn fgn_autocovariance(hurst: f64, k: usize) -> f64 {
    let k = k as f64;
    let e = 2.0 * hurst;
    0.5 * ((k + 1.0).powf(e) - 2.0 * k.powf(e) + (k - 1.0).abs().powf(e))
}

/// Fractional Gaussian noise by spectral synthesis on the circulant embedding
/// of the exact autocovariance (Davies and Harte). Unit variance, zero mean.
pub fn gen_fgn(length: usize, hurst: f64, seed: u64) -> Result<Vec<f64>> {
    if !(hurst > 0.0 && hurst < 1.0) {
        return Err(Error::Config(format!("Hurst exponent must lie in (0, 1), got {hurst}")));
    }
    if length < 2 {
        return Err(Error::Config(format!("fGn length must be at least 2, got {length}")));
    }
    let n = length;
    let m = 2 * n;
    let mut row: Vec<Complex<f64>> = (0..m)
        .map(|i| {
            let lag = if i <= n { i } else { m - i };
            Complex::new(fgn_autocovariance(hurst, lag), 0.0)
        })
        .collect();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(m);
    fft.process(&mut row);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut w = vec![Complex::new(0.0, 0.0); m];
    for k in 0..=n {
        // eigenvalues are nonnegative for fGn; clamp rounding noise
        let lambda = row[k].re.max(0.0);
        if k == 0 || k == n {
            w[k] = Complex::new((lambda / m as f64).sqrt() * normal(), 0.0);
        } else {
            let scale = (lambda / (2.0 * m as f64)).sqrt();
            let (a, b) = (normal(), normal());
            w[k] = Complex::new(scale * a, scale * b);
            w[m - k] = w[k].conj();
        }
    }
    fft.process(&mut w);
    Ok(w[..n].iter().map(|c| c.re).collect())
}

/// Sample autocorrelation at `lag`.
pub fn autocorrelation(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let cov: f64 = (0..n - lag)
        .map(|i| (x[i] - mean) * (x[i + lag] - mean))
        .sum();
    cov / var
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn std_dev(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Default q grid: -4 to 4 in steps of 0.25.
pub fn default_q_grid() -> Vec<f64> {
    (-16..=16).map(|i| i as f64 * 0.25).collect()
}

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn log_space(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loglog_exact_power_law() {
        let pairs: Vec<_> = (1..=10).map(|s| (s as f64, (s as f64).powi(2))).collect();
        let fit = loglog_fit(&pairs).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-9);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-9);
    }

    #[test]
    fn loglog_rejects_two_points_and_nonpositive() {
        assert!(matches!(
            loglog_fit(&[(1.0, 1.0), (2.0, 4.0)]),
            Err(Error::Insufficient(_))
        ));
        assert!(matches!(
            loglog_fit(&[(1.0, 1.0), (2.0, 0.0), (3.0, 9.0)]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn loglog_noisy_slope() {
        // 1% multiplicative noise, seeded
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pairs: Vec<_> = log_space(4.0, 4000.0, 20)
            .into_iter()
            .map(|s| {
                let eps: f64 = StandardNormal.sample(&mut rng);
                (s, s.powf(0.7) * (1.0 + 0.01 * eps))
            })
            .collect();
        let fit = loglog_fit(&pairs).unwrap();
        assert!((fit.slope - 0.7).abs() < 0.02, "{fit:?}");
    }

    #[test]
    fn width_cases() {
        let single = SingularitySpectrum::new(
            Method::Mfdfa,
            vec![SpectrumPoint { q: 0.0, alpha: 0.5, f: 1.0 }],
            vec![],
        );
        assert_eq!(single.width(), 0.0);
        let pts = [0.4, 0.7, 1.1]
            .iter()
            .map(|&a| SpectrumPoint { q: 0.0, alpha: a, f: 0.5 })
            .collect();
        let s = SingularitySpectrum::new(Method::Wtmm, pts, vec![]);
        assert!((s.width() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn support_dimension_is_capped() {
        let pts = |top: f64| {
            vec![
                SpectrumPoint { q: -1.0, alpha: 0.9, f: top - 0.3 },
                SpectrumPoint { q: 0.0, alpha: 0.6, f: top },
                SpectrumPoint { q: 1.0, alpha: 0.4, f: top - 0.1 },
            ]
        };
        let raw = SingularitySpectrum::new(Method::Wtmm, pts(1.04), vec![]);
        assert!((raw.f_shift - 0.04).abs() < 1e-12);
        assert!((raw.max_f().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(raw.alpha_at_max_f(), Some(0.6));
        assert!((raw.points[0].f - 0.9).abs() < 1e-12);
        let ok = SingularitySpectrum::new(Method::Wtmm, pts(0.97), vec![]);
        assert_eq!(ok.f_shift, 0.0);
        assert_eq!(ok.max_f(), Some(0.97));
    }

    #[test]
    fn shuffle_preserves_multiset_and_is_seeded() {
        let x: Vec<f64> = (0..500).map(|i| ((i * 37) % 101) as f64).collect();
        let a = shuffle(&x, 1);
        let b = shuffle(&x, 1);
        let c = shuffle(&x, 2);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, x);
        let mut sa = a.clone();
        let mut sx = x.clone();
        sa.sort_by(f64::total_cmp);
        sx.sort_by(f64::total_cmp);
        assert_eq!(sa, sx);
    }

    #[test]
    fn cascade_basic() {
        assert_eq!(gen_binomial_cascade(1, 0.6).unwrap(), vec![0.6, 0.4]);
        for levels in 1..=16 {
            let c = gen_binomial_cascade(levels, 0.6).unwrap();
            assert_eq!(c.len(), 1 << levels);
            assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(gen_binomial_cascade(0, 0.6).is_err());
        assert!(gen_binomial_cascade(10, 0.5).is_err());
        assert!(gen_binomial_cascade(10, 1.0).is_err());
    }

    #[test]
    fn cascade_formulas_agree() {
        for q in [-4.0, -2.0, -0.5, 0.5, 2.0, 4.0] {
            let p = 0.6;
            assert!((q * cascade_hurst(p, q) - 1.0 - cascade_tau(p, q)).abs() < 1e-12);
        }
        assert!((cascade_tau(0.6, 0.0) + 1.0).abs() < 1e-12);
        assert!(cascade_tau(0.6, 1.0).abs() < 1e-12);
    }

    #[test]
    fn fgn_white_noise_and_lag_one() {
        let n = 1 << 16;
        let w = gen_fgn(n, 0.5, 3).unwrap();
        assert!(autocorrelation(&w, 1).abs() < 0.02);
        assert!((std_dev(&w) - 1.0).abs() < 0.02);
        for h in [0.3, 0.7] {
            let x = gen_fgn(n, h, 11).unwrap();
            let expected = 2f64.powf(2.0 * h - 1.0) - 1.0;
            assert!(
                (autocorrelation(&x, 1) - expected).abs() < 0.05,
                "H={h}: {} vs {expected}",
                autocorrelation(&x, 1)
            );
        }
        assert_eq!(gen_fgn(1000, 0.7, 9).unwrap(), gen_fgn(1000, 0.7, 9).unwrap());
        assert!(gen_fgn(100, 1.0, 0).is_err());
    }

    #[test]
    fn finite_difference_of_quadratic() {
        let q = default_q_grid();
        let y: Vec<f64> = q.iter().map(|v| 3.0 * v * v - v).collect();
        let d = finite_difference(&q, &y);
        // central differences are exact for quadratics
        for i in 1..q.len() - 1 {
            assert!((d[i] - (6.0 * q[i] - 1.0)).abs() < 1e-9);
        }
    }
}

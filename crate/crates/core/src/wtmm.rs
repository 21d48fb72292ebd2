//! Wavelet transform modulus maxima.
//!
//! The continuous wavelet transform uses the third derivative of a Gaussian,
//! which is blind to polynomial trends up to second order:
//!
//! ```text
//! T(n, s) = (1/s) sum_i psi((i - n) / s) x(i),   psi(x) = (3x - x^3) exp(-x^2 / 2)
//! ```
//!
//! Local maxima of `|T(., s)|` are chained across scales into maxima lines.
//! Each line carries the running supremum of `|T|` from its smallest scale,
//! and the partition function sums that supremum to the power `q` over the
//! lines alive at `s`. `tau(q)` is the log-log slope of `Z(q, s)`, and the
//! spectrum follows from the Legendre transform `alpha = tau'`,
//! `f = q alpha - tau`.
//!
//! [`analyze`] integrates the input first (cumulative sum after removing a
//! least-squares quadratic), so increment-type series such as noise or
//! lifetimes are analysed as walks and their Hölder exponents match the MFDFA
//! `h(q)` convention. Quadratic trends in the input leave the result unchanged.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    default_q_grid, finite_difference, log_space, FitResult, Method,
    SingularitySpectrum, SpectrumPoint,
};
use crate::error::{Error, Result};

/// The kernel is cut off beyond this many scale units.
pub const KERNEL_HALF_WIDTH: f64 = 8.0;
/// Scales with fewer live lines are left out of the `tau(q)` fit.
pub const MIN_LINES: usize = 10;
pub const MIN_FIT_SCALES: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WtmmConfig {
    pub q_grid: Vec<f64>,
    /// Explicit scales; empty means the default grid for the series length.
    pub scales: Vec<f64>,
    pub scale_count: usize,
    pub link_window: f64,
    pub edge_margin_factor: f64,
    /// `(s_lo, s_hi)`; `None` selects the central two thirds of the grid in
    /// log scale.
    pub fit_range: Option<(f64, f64)>,
    /// Analyse the mean-free cumulative sum instead of the raw series.
    pub integrate: bool,
}

impl Default for WtmmConfig {
    fn default() -> Self {
        Self {
            q_grid: default_q_grid(),
            scales: Vec::new(),
            scale_count: 30,
            link_window: 1.0,
            edge_margin_factor: 3.0,
            fit_range: None,
            integrate: true,
        }
    }
}

impl WtmmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q_grid.is_empty() {
            return Err(Error::Config("q grid is empty".into()));
        }
        if !(self.link_window > 0.0) {
            return Err(Error::Config("link window must be positive".into()));
        }
        if !(self.edge_margin_factor >= 3.0) {
            return Err(Error::Config("edge margin factor must be at least 3".into()));
        }
        if self.scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("scale grid must be strictly increasing".into()));
        }
        Ok(())
    }

    /// 30 log-spaced scales from 4 to `len / 16`.
    pub fn default_scales(&self, len: usize) -> Vec<f64> {
        let hi = len as f64 / 16.0;
        if hi <= 4.0 {
            return Vec::new();
        }
        log_space(4.0, hi, self.scale_count)
    }

    pub fn resolve_scales(&self, len: usize) -> Vec<f64> {
        if self.scales.is_empty() {
            self.default_scales(len)
        } else {
            self.scales.clone()
        }
    }

    /// Central two thirds (in log scale) of the grid when no range is set.
    pub fn resolve_fit_range(&self, scales: &[f64]) -> (f64, f64) {
        if let Some(range) = self.fit_range {
            return range;
        }
        let (Some(&lo), Some(&hi)) = (scales.first(), scales.last()) else {
            return (0.0, 0.0);
        };
        let (a, b) = (lo.ln(), hi.ln());
        let span = b - a;
        ((a + span / 6.0).exp() * (1.0 - 1e-9), (b - span / 6.0).exp() * (1.0 + 1e-9))
    }
}

/// Third derivative of the Gaussian `exp(-x^2/2)`.
pub fn wavelet_kernel(x: f64) -> f64 {
    (3.0 * x - x * x * x) * (-0.5 * x * x).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveletField {
    pub scales: Vec<f64>,
    /// `coefficients[is][n]`
    pub coefficients: Vec<Vec<f64>>,
    pub edge_margin_factor: f64,
    pub dropped_scales: Vec<f64>,
}

impl WaveletField {
    pub fn len(&self) -> usize {
        self.coefficients.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positions `[lo, hi)` at scale index `is` clear of edge effects.
    pub fn interior(&self, is: usize) -> (usize, usize) {
        let margin = (self.edge_margin_factor * self.scales[is]).ceil() as usize;
        let len = self.len();
        if 2 * margin >= len {
            (0, 0)
        } else {
            (margin, len - margin)
        }
    }

    /// Fraction of positions at scale index `is` inside the interior.
    pub fn coverage(&self, is: usize) -> f64 {
        let (lo, hi) = self.interior(is);
        if self.is_empty() {
            0.0
        } else {
            (hi - lo) as f64 / self.len() as f64
        }
    }

    pub fn is_edge(&self, is: usize, n: usize) -> bool {
        let (lo, hi) = self.interior(is);
        n < lo || n >= hi
    }
}

/// Residual of a global least-squares quadratic fit.
pub fn remove_quadratic(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 3 {
        return vec![0.0; n];
    }
    let centre = (n as f64 - 1.0) / 2.0;
    let t: Vec<f64> = (0..n).map(|i| (i as f64 - centre) / n as f64).collect();
    let mut residual = x.to_vec();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(3);
    for degree in 0..3 {
        let mut v: Vec<f64> = t.iter().map(|x| x.powi(degree)).collect();
        for _ in 0..2 {
            for u in &basis {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= norm);
        let dot: f64 = residual.iter().zip(&v).map(|(a, b)| a * b).sum();
        residual.iter_mut().zip(&v).for_each(|(a, b)| *a -= dot * b);
        basis.push(v);
    }
    residual
}

/// Continuous wavelet transform.
///
/// A global quadratic fit is removed first. Away from the edges this changes
/// nothing (the kernel annihilates quadratics); near the edges it keeps the
/// truncated sum from turning smooth trends into spurious coefficients.
/// Scales above `len / (2 edge_margin_factor)` are dropped and listed in
/// `dropped_scales`.
pub fn cwt(x: &[f64], scales: &[f64], edge_margin_factor: f64) -> Result<WaveletField> {
    convolve(&remove_quadratic(x), scales, edge_margin_factor)
}

/// The plain truncated sum `(1/s) sum_i psi((i - n)/s) x(i)` by FFT, without
/// any trend handling.
pub fn convolve(x: &[f64], scales: &[f64], edge_margin_factor: f64) -> Result<WaveletField> {
    let len = x.len();
    let Some(&min_scale) = scales.first() else {
        return Err(Error::Config("empty scale grid".into()));
    };
    if !(min_scale > 0.0) {
        return Err(Error::Config(format!("scales must be positive, got {min_scale}")));
    }
    if (len as f64) < 20.0 * min_scale {
        return Err(Error::Insufficient(format!(
            "series length {len} below 20 x smallest scale {min_scale}"
        )));
    }
    let limit = len as f64 / (2.0 * edge_margin_factor);
    let (kept, dropped): (Vec<f64>, Vec<f64>) = scales.iter().partition(|&&s| s <= limit);
    if kept.is_empty() {
        return Err(Error::Insufficient("every scale exceeds the edge limit".into()));
    }
    let max_half = (KERNEL_HALF_WIDTH * kept[kept.len() - 1]).floor() as usize;
    let fft_len = (len + 2 * max_half + 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let forward = planner.plan_fft_forward(fft_len);
    let inverse = planner.plan_fft_inverse(fft_len);

    let mut signal: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    signal.resize(fft_len, Complex::new(0.0, 0.0));
    forward.process(&mut signal);

    let norm = 1.0 / fft_len as f64;
    let mut coefficients = Vec::with_capacity(kept.len());
    let mut kernel = vec![Complex::new(0.0, 0.0); fft_len];
    for &s in &kept {
        // T(n) = sum_d g(d) x(n - d) with g(d) = psi(-d / s) / s
        kernel.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        let half = (KERNEL_HALF_WIDTH * s).floor() as usize;
        for d in 0..=half {
            let v = wavelet_kernel(-(d as f64) / s) / s;
            kernel[d] = Complex::new(v, 0.0);
            if d > 0 {
                kernel[fft_len - d] = Complex::new(-v, 0.0);
            }
        }
        forward.process(&mut kernel);
        for (k, sig) in kernel.iter_mut().zip(&signal) {
            *k *= sig;
        }
        inverse.process(&mut kernel);
        coefficients.push(kernel[..len].iter().map(|c| c.re * norm).collect());
    }
    Ok(WaveletField {
        scales: kept,
        coefficients,
        edge_margin_factor,
        dropped_scales: dropped,
    })
}

/// Local maxima of `|T(., s)|` away from the edges: `|T(n)| > |T(n-1)|` and
/// `|T(n)| >= |T(n+1)|`, so a plateau yields its first point only.
pub fn find_maxima(field: &WaveletField, is: usize) -> Vec<usize> {
    let (lo, hi) = field.interior(is);
    local_maxima(&field.coefficients[is], lo, hi)
}

/// Maxima of `|row|` restricted to `[lo, hi)`; neighbours outside the range
/// still take part in the comparison.
pub fn local_maxima(row: &[f64], lo: usize, hi: usize) -> Vec<usize> {
    let lo = lo.max(1);
    let hi = hi.min(row.len().saturating_sub(1));
    (lo..hi)
        .filter(|&n| {
            let v = row[n].abs();
            v > 0.0 && v > row[n - 1].abs() && v >= row[n + 1].abs()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinePoint {
    pub scale_index: usize,
    pub scale: f64,
    pub position: usize,
    pub modulus: f64,
    /// Running supremum of the modulus from the line's smallest scale.
    pub supremum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaximaLine {
    pub points: Vec<LinePoint>,
}

impl MaximaLine {
    pub fn birth_scale(&self) -> f64 {
        self.points[0].scale
    }

    pub fn point_at(&self, scale_index: usize) -> Option<&LinePoint> {
        let first = self.points[0].scale_index;
        if scale_index < first {
            return None;
        }
        self.points
            .get(scale_index - first)
            .filter(|p| p.scale_index == scale_index)
    }
}

/// Chain per-scale maxima into lines, ascending in scale.
///
/// A maximum at `s[j+1]` continues the line through the nearest maximum at
/// `s[j]` if that one lies within `link_window * s[j+1]` positions and has
/// not been claimed by a closer maximum; otherwise it starts a new line.
pub fn chain_maxima(field: &WaveletField, link_window: f64) -> Vec<MaximaLine> {
    let mut lines: Vec<MaximaLine> = Vec::new();
    // line index per maximum at the previous scale, with positions
    let mut previous: Vec<(usize, usize)> = Vec::new();
    for is in 0..field.scales.len() {
        let scale = field.scales[is];
        let row = &field.coefficients[is];
        let maxima = find_maxima(field, is);
        let window = link_window * scale;

        // candidate links sorted by distance, resolved greedily
        let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
        for (im, &n) in maxima.iter().enumerate() {
            let k = previous.partition_point(|&(p, _)| p < n);
            for idx in [k.wrapping_sub(1), k] {
                if let Some(&(p, _)) = previous.get(idx) {
                    let dist = p.abs_diff(n);
                    if dist as f64 <= window {
                        candidates.push((dist, im, idx));
                    }
                }
            }
        }
        candidates.sort_unstable();
        let mut link: Vec<Option<usize>> = vec![None; maxima.len()];
        let mut claimed = vec![false; previous.len()];
        for (_, im, idx) in candidates {
            if link[im].is_none() && !claimed[idx] {
                link[im] = Some(previous[idx].1);
                claimed[idx] = true;
            }
        }

        let mut current = Vec::with_capacity(maxima.len());
        for (im, &n) in maxima.iter().enumerate() {
            let modulus = row[n].abs();
            let line_id = match link[im] {
                Some(id) => {
                    let line = &mut lines[id];
                    let sup = line.points.last().map_or(modulus, |p| p.supremum.max(modulus));
                    line.points.push(LinePoint {
                        scale_index: is,
                        scale,
                        position: n,
                        modulus,
                        supremum: sup,
                    });
                    id
                }
                None => {
                    lines.push(MaximaLine {
                        points: vec![LinePoint {
                            scale_index: is,
                            scale,
                            position: n,
                            modulus,
                            supremum: modulus,
                        }],
                    });
                    lines.len() - 1
                }
            };
            current.push((n, line_id));
        }
        previous = current;
    }
    lines
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFunction {
    pub q_grid: Vec<f64>,
    pub scales: Vec<f64>,
    /// `z[iq][is]`; `None` where the scale was dropped.
    pub z: Vec<Vec<Option<f64>>>,
    pub line_counts: Vec<usize>,
    pub tau: Vec<f64>,
    pub fits: Vec<FitResult>,
    pub fit_range: (f64, f64),
}

impl PartitionFunction {
    pub fn tau_at(&self, q: f64) -> Option<f64> {
        self.q_grid
            .iter()
            .position(|&x| (x - q).abs() < 1e-12)
            .map(|i| self.tau[i])
    }
}

/// `Z(q, s)` over lines alive at `s` that were born at or below the bottom
/// of the fit range, and `tau(q)` from a log-log fit inside it.
///
/// Each `Z(., s)` is divided by `coverage[s]`, the fraction of the series
/// where maxima at that scale can be found.
///
/// `use_supremum = false` sums the plain modulus instead of the running
/// supremum; only useful for comparison.
pub fn partition_function(
    lines: &[MaximaLine],
    scales: &[f64],
    q_grid: &[f64],
    fit_range: (f64, f64),
    coverage: &[f64],
    use_supremum: bool,
) -> Result<PartitionFunction> {
    if coverage.len() != scales.len() || coverage.iter().any(|&c| !(c > 0.0 && c <= 1.0)) {
        return Err(Error::Domain("coverage must hold one fraction in (0, 1] per scale".into()));
    }
    let (lo, hi) = fit_range;
    let eligible: Vec<&MaximaLine> = lines
        .iter()
        .filter(|l| l.birth_scale() <= lo * (1.0 + 1e-12))
        .collect();
    // log moduli per scale
    let mut per_scale: Vec<Vec<f64>> = vec![Vec::new(); scales.len()];
    for line in &eligible {
        for p in &line.points {
            let v = if use_supremum { p.supremum } else { p.modulus };
            per_scale[p.scale_index].push(v.ln());
        }
    }
    let line_counts: Vec<usize> = per_scale.iter().map(Vec::len).collect();

    let mut z = Vec::with_capacity(q_grid.len());
    let mut tau = Vec::with_capacity(q_grid.len());
    let mut fits = Vec::with_capacity(q_grid.len());
    for &q in q_grid {
        let row: Vec<Option<f64>> = per_scale
            .iter()
            .zip(coverage)
            .map(|(logs, c)| {
                if logs.len() < MIN_LINES {
                    return None;
                }
                // log-sum-exp keeps large |q| finite
                let top = logs.iter().map(|l| q * l).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = logs.iter().map(|l| (q * l - top).exp()).sum();
                Some(top + sum.ln() - c.ln())
            })
            .collect();
        let pairs: Vec<(f64, f64)> = scales
            .iter()
            .zip(&row)
            .filter(|(&s, _)| s >= lo && s <= hi)
            .filter_map(|(&s, lz)| lz.map(|lz| (s.ln(), lz)))
            .collect();
        if pairs.len() < MIN_FIT_SCALES {
            return Err(Error::Insufficient(format!(
                "q = {q}: {} scales with at least {MIN_LINES} lines in the fit range, need {MIN_FIT_SCALES}",
                pairs.len()
            )));
        }
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let fit = crate::analysis::linear_fit(&x, &y)?;
        tau.push(fit.slope);
        fits.push(fit);
        z.push(row.into_iter().map(|lz| lz.map(f64::exp)).collect());
    }
    Ok(PartitionFunction {
        q_grid: q_grid.to_vec(),
        scales: scales.to_vec(),
        z,
        line_counts,
        tau,
        fits,
        fit_range,
    })
}

/// Legendre transform of `tau(q)`; points where `alpha` fails to decrease
/// with `q` (non-concave `tau`) are dropped.
pub fn spectrum_from_tau(pf: &PartitionFunction) -> SingularitySpectrum {
    let dtau = finite_difference(&pf.q_grid, &pf.tau);
    let mut points: Vec<SpectrumPoint> = Vec::new();
    let mut dropped = Vec::new();
    let mut last_alpha = f64::INFINITY;
    for ((&q, &t), &alpha) in pf.q_grid.iter().zip(&pf.tau).zip(&dtau) {
        let f = q * alpha - t;
        if !(alpha.is_finite() && f.is_finite()) || alpha > last_alpha + 1e-12 {
            dropped.push(q);
            continue;
        }
        last_alpha = alpha;
        points.push(SpectrumPoint { q, alpha, f });
    }
    SingularitySpectrum::new(Method::Wtmm, points, dropped)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WtmmResult {
    pub field: WaveletField,
    pub line_count: usize,
    pub partition: PartitionFunction,
    pub spectrum: SingularitySpectrum,
}

/// Cumulative sum of `x` after removing its least-squares quadratic.
fn integrate(x: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    remove_quadratic(x)
        .into_iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

pub fn analyze(x: &[f64], config: &WtmmConfig) -> Result<WtmmResult> {
    config.validate()?;
    let signal = if config.integrate { integrate(x) } else { x.to_vec() };
    let scales = config.resolve_scales(x.len());
    if scales.len() < MIN_FIT_SCALES {
        return Err(Error::Insufficient(format!(
            "series of length {} admits only {} scales",
            x.len(),
            scales.len()
        )));
    }
    let field = cwt(&signal, &scales, config.edge_margin_factor)?;
    let lines = chain_maxima(&field, config.link_window);
    let fit_range = config.resolve_fit_range(&field.scales);
    let coverage: Vec<f64> = (0..field.scales.len()).map(|is| field.coverage(is)).collect();
    let partition = partition_function(&lines, &field.scales, &config.q_grid, fit_range, &coverage, true)?;
    let spectrum = spectrum_from_tau(&partition);
    Ok(WtmmResult {
        line_count: lines.len(),
        field,
        partition,
        spectrum,
    })
}

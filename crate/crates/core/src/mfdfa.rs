//! Multifractal detrended fluctuation analysis.
//!
//! The series is integrated into a mean-free profile, cut into `floor(len/s)`
//! windows from the start and as many from the end, each window detrended by
//! a least-squares polynomial of order `m`, and the squared-residual variances
//! combined into the q-th order fluctuation function
//!
//! ```text
//! F_q(s) = ( mean_v [F2(v, s)]^(q/2) )^(1/q),    F_0(s) = exp( mean_v ln F2(v, s) / 2 )
//! ```
//!
//! `h(q)` is the log-log slope of `F_q(s)`; the spectrum follows from
//! `alpha = h + q h'` and `f = q (alpha - h) + 1`.

use serde::{Deserialize, Serialize};

use crate::analysis::{
    default_q_grid, finite_difference, loglog_fit, FitResult, Method,
    SingularitySpectrum, SpectrumPoint,
};
use crate::error::{Error, Result};

pub const MIN_SERIES_LEN: usize = 16;
/// Scales need this many retained windows to contribute to `F_q`.
pub const MIN_WINDOWS: usize = 4;
/// `h(q)` fits need this many scales inside the fit range.
pub const MIN_FIT_SCALES: usize = 6;
/// Below this r² at q = 2 the result carries a scaling-quality warning.
pub const MIN_Q2_R2: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfdfaConfig {
    pub poly_order: usize,
    pub q_grid: Vec<f64>,
    /// Explicit scales; empty means the default grid for the series length.
    pub scales: Vec<usize>,
    /// Density of the default grid.
    pub scales_per_octave: usize,
    /// `(s_lo, s_hi)`; `None` fits over every usable scale.
    pub fit_range: Option<(usize, usize)>,
}

impl Default for MfdfaConfig {
    fn default() -> Self {
        Self {
            poly_order: 2,
            q_grid: default_q_grid(),
            scales: Vec::new(),
            scales_per_octave: 4,
            fit_range: None,
        }
    }
}

impl MfdfaConfig {
    pub fn min_scale(&self) -> usize {
        MIN_SERIES_LEN.max(self.poly_order + 2)
    }

    /// Integer scales `s_min 2^(k / scales_per_octave)` up to `len / 4`, with
    /// `s_min = max(16, m + 2)`.
    pub fn default_scales(&self, len: usize) -> Vec<usize> {
        let lo = self.min_scale();
        let hi = len / 4;
        if hi < lo || self.scales_per_octave == 0 {
            return Vec::new();
        }
        let step = 1.0 / self.scales_per_octave as f64;
        let mut scales: Vec<usize> = (0..)
            .map(|k| (lo as f64 * (k as f64 * step).exp2()).round() as usize)
            .take_while(|&s| s <= hi)
            .collect();
        scales.dedup();
        scales
    }

    pub fn resolve_scales(&self, len: usize) -> Result<Vec<usize>> {
        if self.poly_order == 0 {
            return Err(Error::Config("polynomial order must be positive".into()));
        }
        if self.q_grid.is_empty() {
            return Err(Error::Config("q grid is empty".into()));
        }
        let scales = if self.scales.is_empty() {
            self.default_scales(len)
        } else {
            let mut s = self.scales.clone();
            s.sort_unstable();
            s.dedup();
            s
        };
        if let Some(&s) = scales.iter().find(|&&s| s < self.poly_order + 2) {
            return Err(Error::Config(format!(
                "scale {s} too small for polynomial order {}",
                self.poly_order
            )));
        }
        if let Some(&s) = scales.iter().find(|&&s| s > len / 4) {
            return Err(Error::Config(format!(
                "scale {s} exceeds a quarter of the series length {len}"
            )));
        }
        if scales.len() < MIN_FIT_SCALES {
            return Err(Error::Insufficient(format!(
                "series of length {len} admits only {} scales",
                scales.len()
            )));
        }
        Ok(scales)
    }
}

/// Mean-free cumulative sum.
pub fn profile(x: &[f64]) -> Result<Vec<f64>> {
    if x.len() < MIN_SERIES_LEN {
        return Err(Error::Insufficient(format!(
            "series length {} below {MIN_SERIES_LEN}",
            x.len()
        )));
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let spread = x.iter().fold(0.0f64, |m, v| m.max((v - mean).abs()));
    if spread == 0.0 {
        return Err(Error::Degenerate("constant series".into()));
    }
    let mut acc = 0.0;
    Ok(x
        .iter()
        .map(|v| {
            acc += v - mean;
            acc
        })
        .collect())
}

/// Orthonormal polynomial basis of degree `0..=order` on `s` equispaced points.
struct PolyBasis {
    vectors: Vec<Vec<f64>>,
}

impl PolyBasis {
    fn new(s: usize, order: usize) -> Self {
        let centre = (s as f64 - 1.0) / 2.0;
        let t: Vec<f64> = (0..s).map(|k| (k as f64 - centre) / s as f64).collect();
        let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(order + 1);
        for degree in 0..=order {
            let mut v: Vec<f64> = t.iter().map(|x| x.powi(degree as i32)).collect();
            // modified Gram-Schmidt, twice for stability
            for _ in 0..2 {
                for u in &vectors {
                    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= norm);
            vectors.push(v);
        }
        Self { vectors }
    }

    /// Mean squared residual after projecting out the basis, plus the window's
    /// mean square for the exclusion test.
    fn residual_variance(&self, window: &[f64], scratch: &mut Vec<f64>) -> (f64, f64) {
        scratch.clear();
        scratch.extend_from_slice(window);
        for u in &self.vectors {
            let dot: f64 = scratch.iter().zip(u).map(|(a, b)| a * b).sum();
            scratch.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let s = window.len() as f64;
        let var = scratch.iter().map(|r| r * r).sum::<f64>() / s;
        let power = window.iter().map(|y| y * y).sum::<f64>() / s;
        (var, power)
    }
}

/// Detrended variances of one scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentVariances {
    pub scale: usize,
    /// `F2(v, s)` for the `2 M_s` windows, forward ones first; `None` marks
    /// windows with zero residual variance.
    pub variances: Vec<Option<f64>>,
}

impl SegmentVariances {
    pub fn retained(&self) -> impl Iterator<Item = f64> + '_ {
        self.variances.iter().flatten().copied()
    }

    pub fn excluded(&self) -> usize {
        self.variances.iter().filter(|v| v.is_none()).count()
    }
}

/// Residual variance relative to the window power below which a window
/// counts as perfectly detrended.
const ZERO_VARIANCE_RELATIVE: f64 = 1e-20;

pub fn segment_variance(profile: &[f64], s: usize, order: usize) -> Result<SegmentVariances> {
    if s < order + 2 {
        return Err(Error::Config(format!(
            "scale {s} too small for polynomial order {order}"
        )));
    }
    let m_s = profile.len() / s;
    if m_s == 0 {
        return Err(Error::Config(format!(
            "scale {s} exceeds series length {}",
            profile.len()
        )));
    }
    let basis = PolyBasis::new(s, order);
    let mut scratch = Vec::with_capacity(s);
    let len = profile.len();
    let starts = (0..m_s)
        .map(|v| v * s)
        .chain((0..m_s).map(|v| len - (v + 1) * s));
    let variances = starts
        .map(|start| {
            let (var, power) = basis.residual_variance(&profile[start..start + s], &mut scratch);
            (var > ZERO_VARIANCE_RELATIVE * power && var > 0.0).then_some(var)
        })
        .collect();
    Ok(SegmentVariances {
        scale: s,
        variances,
    })
}

/// `F_q(s)` from the retained window variances; `None` when fewer than
/// [`MIN_WINDOWS`] windows survive.
pub fn fluctuation_function(variances: &SegmentVariances, q: f64) -> Option<f64> {
    let retained: Vec<f64> = variances.retained().collect();
    if retained.len() < MIN_WINDOWS {
        return None;
    }
    let n = retained.len() as f64;
    let value = if q == 0.0 {
        (0.5 * retained.iter().map(|f2| f2.ln()).sum::<f64>() / n).exp()
    } else {
        // factor out the largest term to keep extreme q finite
        let logs: Vec<f64> = retained.iter().map(|f2| 0.5 * q * f2.ln()).collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = logs.iter().map(|l| (l - top).exp()).sum::<f64>() / n;
        ((top + mean.ln()) / q).exp()
    };
    value.is_finite().then_some(value)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluctuationSet {
    pub q_grid: Vec<f64>,
    pub scales: Vec<usize>,
    /// `values[iq][is]`
    pub values: Vec<Vec<Option<f64>>>,
    pub segment_count: Vec<usize>,
    pub excluded_segments: Vec<usize>,
}

pub fn fluctuation_set(x: &[f64], config: &MfdfaConfig) -> Result<FluctuationSet> {
    let y = profile(x)?;
    let scales = config.resolve_scales(x.len())?;
    let per_scale: Vec<SegmentVariances> = scales
        .iter()
        .map(|&s| segment_variance(&y, s, config.poly_order))
        .collect::<Result<_>>()?;
    let values = config
        .q_grid
        .iter()
        .map(|&q| per_scale.iter().map(|v| fluctuation_function(v, q)).collect())
        .collect();
    Ok(FluctuationSet {
        q_grid: config.q_grid.clone(),
        segment_count: per_scale.iter().map(|v| v.variances.len()).collect(),
        excluded_segments: per_scale.iter().map(|v| v.excluded()).collect(),
        scales,
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedHurst {
    pub q_grid: Vec<f64>,
    pub h: Vec<f64>,
    pub fits: Vec<FitResult>,
    pub warnings: Vec<String>,
}

impl GeneralizedHurst {
    pub fn at(&self, q: f64) -> Option<f64> {
        self.q_grid
            .iter()
            .position(|&x| (x - q).abs() < 1e-12)
            .map(|i| self.h[i])
    }

    pub fn fit_at(&self, q: f64) -> Option<&FitResult> {
        self.q_grid
            .iter()
            .position(|&x| (x - q).abs() < 1e-12)
            .map(|i| &self.fits[i])
    }
}

pub fn generalized_hurst(
    set: &FluctuationSet,
    fit_range: Option<(usize, usize)>,
) -> Result<GeneralizedHurst> {
    let (lo, hi) = fit_range.unwrap_or((0, usize::MAX));
    let mut h = Vec::with_capacity(set.q_grid.len());
    let mut fits = Vec::with_capacity(set.q_grid.len());
    let mut warnings = Vec::new();
    for (iq, &q) in set.q_grid.iter().enumerate() {
        let pairs: Vec<(f64, f64)> = set
            .scales
            .iter()
            .zip(&set.values[iq])
            .filter(|(&s, _)| s >= lo && s <= hi)
            .filter_map(|(&s, f)| f.map(|f| (s as f64, f)))
            .collect();
        if pairs.len() < MIN_FIT_SCALES {
            return Err(Error::Insufficient(format!(
                "q = {q}: {} usable scales in fit range, need {MIN_FIT_SCALES}",
                pairs.len()
            )));
        }
        let fit = loglog_fit(&pairs)?;
        if q == 2.0 && fit.r2 < MIN_Q2_R2 {
            warnings.push(format!(
                "weak scaling: r2 = {:.3} at q = 2 (below {MIN_Q2_R2})",
                fit.r2
            ));
        }
        h.push(fit.slope);
        fits.push(fit);
    }
    Ok(GeneralizedHurst {
        q_grid: set.q_grid.clone(),
        h,
        fits,
        warnings,
    })
}

/// `alpha = h + q h'`, `f = q (alpha - h) + 1`, with `h'` by finite differences.
pub fn spectrum_from_h(hurst: &GeneralizedHurst) -> SingularitySpectrum {
    let dh = finite_difference(&hurst.q_grid, &hurst.h);
    let mut points = Vec::new();
    let mut dropped = Vec::new();
    for ((&q, &h), &d) in hurst.q_grid.iter().zip(&hurst.h).zip(&dh) {
        let alpha = h + q * d;
        let f = q * (alpha - h) + 1.0;
        if alpha.is_finite() && f.is_finite() {
            points.push(SpectrumPoint { q, alpha, f });
        } else {
            dropped.push(q);
        }
    }
    SingularitySpectrum::new(Method::Mfdfa, points, dropped)
}

/// Whole pipeline output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfdfaResult {
    pub fluctuations: FluctuationSet,
    pub hurst: GeneralizedHurst,
    pub spectrum: SingularitySpectrum,
}

pub fn analyze(x: &[f64], config: &MfdfaConfig) -> Result<MfdfaResult> {
    let fluctuations = fluctuation_set(x, config)?;
    let hurst = generalized_hurst(&fluctuations, config.fit_range)?;
    let spectrum = spectrum_from_h(&hurst);
    Ok(MfdfaResult {
        fluctuations,
        hurst,
        spectrum,
    })
}

//! Analytic predictions and diagnostics: Wick moments of circular Gaussian
//! amplitudes, the Gaussian-limit correlation values, speckle correlation
//! between incidences and backscattering cone fits.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::ensemble::SpeckleAccumulator;
use crate::qstates::{StateColumns, StateKind};
use crate::solver::K0;

pub const MAX_WICK_ORDER: usize = 6;
/// Width constant in `l* = WIDTH_CONSTANT / (k FWHM)`.
pub const WIDTH_CONSTANT: f64 = 0.7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("moment order too high for enumeration ({0} > {MAX_WICK_ORDER})")]
    OrderTooHigh(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("no cone detected: {0}")]
    NoCone(String),
    #[error("zero variance channel at offset {offset_deg} deg, detection angle {theta:.6} rad")]
    ZeroVariance { offset_deg: f64, theta: f64 },
}

/// `E[conj(z_m1)..conj(z_mt) z_n1..z_nt]` for zero-mean circular Gaussian
/// variables with `cov(m, n) = E[conj(z_m) z_n]`, summed over all pairings.
pub fn wick_moment<F>(conjugated: &[usize], unconjugated: &[usize], cov: F) -> Result<Complex64, AnalyticsError>
where
    F: Fn(usize, usize) -> Complex64,
{
    if conjugated.len() != unconjugated.len() {
        return Ok(Complex64::new(0.0, 0.0));
    }
    let t = conjugated.len();
    if t > MAX_WICK_ORDER {
        return Err(AnalyticsError::OrderTooHigh(t));
    }
    let mut perm: Vec<usize> = (0..t).collect();
    let mut total = Complex64::new(0.0, 0.0);
    permute(&mut perm, 0, &mut |p| {
        let mut term = Complex64::new(1.0, 0.0);
        for (k, &pk) in p.iter().enumerate() {
            term *= cov(conjugated[pk], unconjugated[k]);
        }
        total += term;
    });
    Ok(total)
}

fn permute(p: &mut [usize], start: usize, visit: &mut dyn FnMut(&[usize])) {
    if start == p.len() {
        visit(p);
        return;
    }
    for i in start..p.len() {
        p.swap(start, i);
        permute(p, start + 1, visit);
        p.swap(start, i);
    }
}

/// Closed-form correlations and mean currents of the pure entangled state
/// when every scattering amplitude is an independent circular Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianPrediction {
    pub schmidt_rank: usize,
    pub sigma2: f64,
    pub c_coinciding: f64,
    pub c_distinct: f64,
    pub i1_mean: f64,
    pub i2_mean_coinciding: f64,
    pub i2_mean_distinct: f64,
}

fn check_gaussian_args(m: usize, sigma2: f64) -> Result<(), AnalyticsError> {
    if m == 0 {
        return Err(AnalyticsError::Invalid("schmidt rank must be at least 1".into()));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(AnalyticsError::Invalid(format!("sigma2 must be positive, got {sigma2}")));
    }
    Ok(())
}

pub fn gaussian_prediction(m: usize, sigma2: f64) -> Result<GaussianPrediction, AnalyticsError> {
    check_gaussian_args(m, sigma2)?;
    let mf = m as f64;
    Ok(GaussianPrediction {
        schmidt_rank: m,
        sigma2,
        c_coinciding: 2.0 * mf / (1.0 + 2.0 * mf),
        c_distinct: 0.5,
        i1_mean: 2.0 * sigma2,
        i2_mean_coinciding: 4.0 * sigma2 * sigma2,
        i2_mean_distinct: 2.0 * sigma2 * sigma2,
    })
}

/// The same prediction assembled term by term from [`wick_moment`] applied
/// to the pure-state current formulas. Variables are indexed as
/// `row * 2M + column` with column order `(q_1, -q_1, q_2, -q_2, ...)`.
pub fn gaussian_prediction_from_wick(m: usize, sigma2: f64) -> Result<GaussianPrediction, AnalyticsError> {
    check_gaussian_args(m, sigma2)?;
    let width = 2 * m;
    let cov = |a: usize, b: usize| Complex64::new(if a == b { sigma2 } else { 0.0 }, 0.0);
    let var = |row: usize, col: usize| row * width + col;
    let mf = m as f64;

    let mut i1 = 0.0;
    for x in 0..width {
        i1 += wick_moment(&[var(0, x)], &[var(0, x)], cov)?.re;
    }
    i1 /= mf;

    let mut i1_sq = 0.0;
    let mut i1_i1p = 0.0;
    for x in 0..width {
        for y in 0..width {
            i1_sq += wick_moment(&[var(0, x), var(0, y)], &[var(0, x), var(0, y)], cov)?.re;
            i1_i1p += wick_moment(&[var(0, x), var(1, y)], &[var(0, x), var(1, y)], cov)?.re;
        }
    }
    i1_sq /= mf * mf;
    i1_i1p /= mf * mf;

    // The pair amplitude of rows (i, j) is a sum of the four-term products
    // S_i,p S_j,n + S_i,n S_j,p over pairs; expand |.|^2 into moments.
    let pair_terms = |ri: usize, rj: usize| -> Vec<[usize; 2]> {
        (0..m)
            .flat_map(|k| {
                let (p, n) = (2 * k, 2 * k + 1);
                [[var(ri, p), var(rj, n)], [var(ri, n), var(rj, p)]]
            })
            .collect()
    };
    let i2 = |ri: usize, rj: usize| -> Result<f64, AnalyticsError> {
        let terms = pair_terms(ri, rj);
        let mut total = 0.0;
        for a in &terms {
            for b in &terms {
                total += wick_moment(a, b, cov)?.re;
            }
        }
        Ok(total / mf)
    };
    let i2_same = i2(0, 0)?;
    let i2_distinct = i2(0, 1)?;
    Ok(GaussianPrediction {
        schmidt_rank: m,
        sigma2,
        c_coinciding: i2_same / i1_sq,
        c_distinct: i2_distinct / i1_i1p,
        i1_mean: i1,
        i2_mean_coinciding: i2_same,
        i2_mean_distinct: i2_distinct,
    })
}

/// Monte Carlo estimate of the Gaussian-limit correlations using the state
/// formulas on synthetic amplitude rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GaussianMonteCarlo {
    pub schmidt_rank: usize,
    pub n_samples: usize,
    pub c_coinciding: f64,
    pub c_coinciding_se: f64,
    pub c_distinct: f64,
    pub c_distinct_se: f64,
}

/// Ratio of means with its delta-method standard error.
fn ratio_with_se(num: &[f64], den: &[f64]) -> (f64, f64) {
    let n = num.len() as f64;
    let mx = num.iter().sum::<f64>() / n;
    let my = den.iter().sum::<f64>() / n;
    let r = mx / my;
    let var = num
        .iter()
        .zip(den)
        .map(|(x, y)| (x - r * y).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    (r, (var / n).sqrt() / my)
}

pub fn gaussian_monte_carlo(
    kind: StateKind,
    m: usize,
    n_samples: usize,
    seed: u64,
) -> Result<GaussianMonteCarlo, AnalyticsError> {
    if m == 0 || n_samples < 2 {
        return Err(AnalyticsError::Invalid("need rank >= 1 and at least two samples".into()));
    }
    let cols = StateColumns {
        kind,
        qe_factor: 1.0,
        columns: (0..2 * m).collect(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 0.5f64.sqrt();
    let draw = |rng: &mut ChaCha8Rng| -> Vec<Complex64> {
        (0..2 * m)
            .map(|_| {
                let re: f64 = StandardNormal.sample(rng);
                let im: f64 = StandardNormal.sample(rng);
                Complex64::new(h * re, h * im)
            })
            .collect()
    };
    let mut same_num = Vec::with_capacity(n_samples);
    let mut same_den = Vec::with_capacity(n_samples);
    let mut dist_num = Vec::with_capacity(n_samples);
    let mut dist_den = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let (ia, ib) = (cols.i1(&a), cols.i1(&b));
        same_num.push(cols.i2(&a, &a));
        same_den.push(ia * ia);
        dist_num.push(cols.i2(&a, &b));
        dist_den.push(ia * ib);
    }
    let (c_coinciding, c_coinciding_se) = ratio_with_se(&same_num, &same_den);
    let (c_distinct, c_distinct_se) = ratio_with_se(&dist_num, &dist_den);
    Ok(GaussianMonteCarlo {
        schmidt_rank: m,
        n_samples,
        c_coinciding,
        c_coinciding_se,
        c_distinct,
        c_distinct_se,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpeckleCorrelation {
    pub offsets: Vec<f64>,
    pub gamma_exact: Vec<f64>,
    pub gamma_wick: Vec<f64>,
    /// Full width at half maximum of `gamma_exact` in degrees, if both
    /// half-maximum crossings (or one crossing of a one-sided scan starting
    /// at zero offset) fall inside the scanned range.
    pub corr_width: Option<f64>,
}

/// Angular speckle correlation between the reference incidence and each
/// requested offset. Both estimators are formed per detection angle from
/// ensemble moments and then averaged over detection angles.
pub fn speckle_correlation(
    acc: &SpeckleAccumulator,
    reference_deg: f64,
    offsets_deg: &[f64],
) -> Result<SpeckleCorrelation, AnalyticsError> {
    if (acc.reference_deg - reference_deg).abs() > 1e-9 {
        return Err(AnalyticsError::Invalid(format!(
            "accumulator reference is {} deg, requested {reference_deg} deg",
            acc.reference_deg
        )));
    }
    let total = acc.totals();
    if total.count < 2 {
        return Err(AnalyticsError::Invalid("speckle correlation needs at least two realizations".into()));
    }
    let n = total.count as f64;
    let mut gamma_exact = Vec::with_capacity(offsets_deg.len());
    let mut gamma_wick = Vec::with_capacity(offsets_deg.len());
    for &off in offsets_deg {
        let o = acc
            .offsets_deg
            .iter()
            .position(|x| (x - off).abs() < 1e-9)
            .ok_or_else(|| AnalyticsError::Invalid(format!("offset {off} deg was not recorded")))?;
        let (mut ge, mut gw) = (0.0, 0.0);
        for (g, theta) in acc.thetas.iter().enumerate() {
            let [s1, s2, s11, s22, s12] = total.intensity[o][g];
            let (m1, m2) = (s1 / n, s2 / n);
            let v1 = s11 / n - m1 * m1;
            let v2 = s22 / n - m2 * m2;
            if !(v1 > 0.0 && v2 > 0.0) {
                return Err(AnalyticsError::ZeroVariance { offset_deg: off, theta: *theta });
            }
            ge += (s12 / n - m1 * m2) / (v1 * v2).sqrt();
            gw += (total.cross[o][g] / n).norm_sqr() / (m1 * m2);
        }
        let na = acc.thetas.len() as f64;
        gamma_exact.push(ge / na);
        gamma_wick.push(gw / na);
    }
    let corr_width = half_max_width(offsets_deg, &gamma_exact);
    Ok(SpeckleCorrelation {
        offsets: offsets_deg.to_vec(),
        gamma_exact,
        gamma_wick,
        corr_width,
    })
}

fn half_max_width(x: &[f64], y: &[f64]) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let p = (0..pts.len()).max_by(|&a, &b| pts[a].1.total_cmp(&pts[b].1))?;
    let half = 0.5 * pts[p].1;
    let right = crossing(&pts, p, half, 1);
    let left = crossing(&pts, p, half, -1);
    match (left, right) {
        (Some(l), Some(r)) => Some(r - l),
        (None, Some(r)) if p == 0 && pts[0].0 == 0.0 => Some(2.0 * r),
        _ => None,
    }
}

/// Abscissa where the curve first falls below `level` walking from `start`
/// in direction `step`, by linear interpolation.
fn crossing(pts: &[(f64, f64)], start: usize, level: f64, step: isize) -> Option<f64> {
    let mut i = start as isize;
    loop {
        let j = i + step;
        if j < 0 || j as usize >= pts.len() {
            return None;
        }
        let (a, b) = (pts[i as usize], pts[j as usize]);
        if b.1 < level {
            let f = (a.1 - level) / (a.1 - b.1);
            return Some(a.0 + f * (b.0 - a.0));
        }
        i = j;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConeFit {
    pub peak_angle: f64,
    pub peak_value: f64,
    pub background: f64,
    pub fwhm: f64,
    pub enhancement: f64,
    pub mean_free_path: f64,
    pub kl_star: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeFitOptions {
    /// Half-width of the window searched for the peak, radians.
    pub search_half_width: f64,
    /// Half-width around the peak left out of the background, radians.
    pub peak_half_width: f64,
    pub k: f64,
}

impl Default for ConeFitOptions {
    fn default() -> Self {
        Self {
            search_half_width: 5f64.to_radians(),
            peak_half_width: 20f64.to_radians(),
            k: K0,
        }
    }
}

/// Angular window `(center, half_width)` in radians.
pub type Window = (f64, f64);

pub fn fit_cone(
    thetas: &[f64],
    curve: &[f64],
    expected_peak: f64,
    exclusions: &[Window],
    opts: &ConeFitOptions,
) -> Result<ConeFit, AnalyticsError> {
    if thetas.len() != curve.len() || thetas.len() < 3 {
        return Err(AnalyticsError::Invalid("curve and grid lengths differ or are too short".into()));
    }
    let n = curve.len();
    let is_local_max = |i: usize| {
        let left = if i > 0 { curve[i - 1] } else { f64::NEG_INFINITY };
        let right = if i + 1 < n { curve[i + 1] } else { f64::NEG_INFINITY };
        curve[i] >= left && curve[i] >= right && (curve[i] > left || curve[i] > right) && i > 0 && i + 1 < n
    };
    let p = (0..n)
        .filter(|&i| (thetas[i] - expected_peak).abs() <= opts.search_half_width + 1e-12)
        .filter(|&i| is_local_max(i))
        .max_by(|&a, &b| curve[a].total_cmp(&curve[b]))
        .ok_or_else(|| {
            AnalyticsError::NoCone(format!(
                "no local maximum within {:.2} deg of {:.4} rad",
                opts.search_half_width.to_degrees(),
                expected_peak
            ))
        })?;
    let peak_angle = thetas[p];
    let peak = curve[p];

    let mut windows = exclusions.to_vec();
    windows.push((peak_angle, opts.peak_half_width));
    let background = background_level(thetas, curve, &windows)
        .ok_or_else(|| AnalyticsError::NoCone("no samples left for the background".into()))?;
    if !(peak > background && background > 0.0) {
        return Err(AnalyticsError::NoCone(format!(
            "peak {peak} does not exceed background {background}"
        )));
    }
    let level = 0.5 * (peak + background);
    let pts: Vec<(f64, f64)> = thetas.iter().copied().zip(curve.iter().copied()).collect();
    let right = crossing(&pts, p, level, 1);
    let left = crossing(&pts, p, level, -1);
    let fwhm = match (left, right) {
        (Some(l), Some(r)) => r - l,
        (Some(l), None) => 2.0 * (peak_angle - l),
        (None, Some(r)) => 2.0 * (r - peak_angle),
        (None, None) => return Err(AnalyticsError::NoCone("no half-maximum crossing".into())),
    };
    let mean_free_path = WIDTH_CONSTANT / (opts.k * fwhm);
    Ok(ConeFit {
        peak_angle,
        peak_value: peak,
        background,
        fwhm,
        enhancement: peak / background,
        mean_free_path,
        kl_star: opts.k * mean_free_path,
    })
}

/// Median of the curve outside `exclusions`, the estimator used for the
/// diffuse background of cone fits.
pub fn background_level(thetas: &[f64], curve: &[f64], exclusions: &[Window]) -> Option<f64> {
    let mut v: Vec<f64> = thetas
        .iter()
        .zip(curve)
        .filter(|(t, _)| exclusions.iter().all(|(c, w)| (*t - c).abs() > *w))
        .map(|(_, y)| *y)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    Some(if m % 2 == 1 { v[m / 2] } else { 0.5 * (v[m / 2 - 1] + v[m / 2]) })
}

/// Ratio of the largest value within `opts.search_half_width` of `angle` to
/// the background. Unlike [`fit_cone`] this does not require a local
/// maximum, so it also measures the absence of a cone.
pub fn enhancement_at(
    thetas: &[f64],
    curve: &[f64],
    angle: f64,
    exclusions: &[Window],
    opts: &ConeFitOptions,
) -> Result<f64, AnalyticsError> {
    let peak = thetas
        .iter()
        .zip(curve)
        .filter(|(t, _)| (*t - angle).abs() <= opts.search_half_width + 1e-12)
        .map(|(_, y)| *y)
        .fold(f64::NEG_INFINITY, f64::max);
    if !peak.is_finite() {
        return Err(AnalyticsError::Invalid(format!("no samples near {angle} rad")));
    }
    let mut windows = exclusions.to_vec();
    windows.push((angle, opts.peak_half_width));
    let bg = background_level(thetas, curve, &windows)
        .filter(|b| *b > 0.0)
        .ok_or_else(|| AnalyticsError::Invalid("no positive background".into()))?;
    Ok(peak / bg)
}

/// Number of local maxima whose topographic prominence is at least
/// `min_prominence`.
pub fn count_peaks(curve: &[f64], min_prominence: f64) -> usize {
    let n = curve.len();
    let mut count = 0;
    for i in 1..n.saturating_sub(1) {
        let y = curve[i];
        if !(y > curve[i - 1] && y >= curve[i + 1]) {
            continue;
        }
        let mut left_min = y;
        let mut j = i;
        while j > 0 {
            j -= 1;
            if curve[j] > y {
                break;
            }
            left_min = left_min.min(curve[j]);
        }
        let mut right_min = y;
        let mut j = i;
        while j + 1 < n {
            j += 1;
            if curve[j] > y {
                break;
            }
            right_min = right_min.min(curve[j]);
        }
        if y - left_min.max(right_min) >= min_prominence {
            count += 1;
        }
    }
    count
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContrastSummary {
    pub pure_range: f64,
    pub mixed_range: f64,
    pub pure_max: f64,
    pub mixed_max: f64,
    /// Set when the mixed state oscillates more strongly than the pure one.
    pub violation: bool,
}

pub fn mixed_vs_pure_contrast(pure: &[f64], mixed: &[f64]) -> Result<ContrastSummary, AnalyticsError> {
    if pure.len() != mixed.len() || pure.is_empty() {
        return Err(AnalyticsError::Invalid("curves must share a nonempty grid".into()));
    }
    let span = |c: &[f64]| {
        let max = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = c.iter().cloned().fold(f64::INFINITY, f64::min);
        (max - min, max)
    };
    let (pure_range, pure_max) = span(pure);
    let (mixed_range, mixed_max) = span(mixed);
    Ok(ContrastSummary {
        pure_range,
        mixed_range,
        pure_max,
        mixed_max,
        violation: mixed_range > pure_range,
    })
}

//! Cross-sectional dispersion, distribution moments, QQ data, period scatter
//! and correlation.
//!
//! Large reductions split their input into fixed-size chunks, sum each chunk
//! with Neumaier compensation and merge the partials in chunk order. The
//! result depends on the chunk size only, never on the thread count.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::grid::GridSource;
use crate::pipeline::{demean, for_each_year, ChangeAccumulator, DemeanedDiffGrid, PipelineError, YearStep};
use crate::regions::{RegionMask, Scope};

/// Elements per partial sum in chunked reductions.
pub const SUM_CHUNK: usize = 1 << 16;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("insufficient data: need at least {needed} values, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("correlation undefined: zero variance")]
    ZeroVariance,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{0}")]
    Input(String),
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn merge(&mut self, other: CompensatedSum) {
        self.add(other.sum);
        self.add(other.carry);
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

/// Sum of `f(x)` over `values` with a fixed chunk-merge order.
pub fn chunked_sum<F>(values: &[f64], f: F) -> f64
where
    F: Fn(f64) -> f64 + Sync,
{
    let partials: Vec<CompensatedSum> = values
        .par_chunks(SUM_CHUNK)
        .map(|c| {
            let mut s = CompensatedSum::default();
            c.iter().for_each(|&x| s.add(f(x)));
            s
        })
        .collect();
    let mut total = CompensatedSum::default();
    partials.into_iter().for_each(|p| total.merge(p));
    total.value()
}

/// Population standard deviation of a demeaned grid, `sqrt(sum v^2 / n)`.
pub fn cross_sectional_sigma(d: &DemeanedDiffGrid) -> Result<(f64, usize), StatsError> {
    let n = d.len();
    if n < 2 {
        return Err(StatsError::InsufficientData { needed: 2, got: n });
    }
    let ss = chunked_sum(d.values(), |v| v * v);
    Ok(((ss / n as f64).sqrt(), n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SigmaEntry {
    pub year: i32,
    /// `NaN` when the year had fewer than two active pixels in scope.
    pub sigma: f64,
    pub active_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaSeries {
    pub scope: Scope,
    pub entries: Vec<SigmaEntry>,
}

/// One cross-sectional sigma per consecutive year pair.
pub fn sigma_series<S: GridSource + ?Sized>(
    source: &S,
    mask: &RegionMask,
    scope: Scope,
) -> Result<SigmaSeries, StatsError> {
    mask.check_geometry(source.geometry()).map_err(PipelineError::from)?;
    mask.validate_scope(scope).map_err(PipelineError::from)?;
    if source.years().len() < 2 {
        return Err(StatsError::InsufficientData { needed: 2, got: source.years().len() });
    }
    let mut entries = Vec::new();
    for_each_year(source, None, crate::pipeline::DEFAULT_CHUNK_ROWS, |step: YearStep<'_>| -> Result<(), StatsError> {
        if let Some(diff) = step.diff {
            entries.push(sigma_entry(demean(&diff, mask, scope).as_ref().ok(), diff.year()));
        }
        Ok(())
    })?;
    Ok(SigmaSeries { scope, entries })
}

/// The series entry for one year, `NaN` when sigma is undefined.
pub fn sigma_entry(d: Option<&DemeanedDiffGrid>, year: i32) -> SigmaEntry {
    match d.map(cross_sectional_sigma) {
        Some(Ok((sigma, n))) => SigmaEntry { year, sigma, active_count: n },
        Some(Err(_)) => SigmaEntry { year, sigma: f64::NAN, active_count: d.map_or(0, |d| d.len()) },
        None => SigmaEntry { year, sigma: f64::NAN, active_count: 0 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentSummary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
}

/// Population moments by two chunked passes. Skewness and kurtosis are
/// `NaN` when the standard deviation is zero.
pub fn moments(values: &[f64]) -> Result<MomentSummary, StatsError> {
    let n = values.len();
    if n < 4 {
        return Err(StatsError::InsufficientData { needed: 4, got: n });
    }
    let nf = n as f64;
    let mean = chunked_sum(values, |x| x) / nf;
    let m2 = chunked_sum(values, |x| (x - mean).powi(2)) / nf;
    let m3 = chunked_sum(values, |x| (x - mean).powi(3)) / nf;
    let m4 = chunked_sum(values, |x| (x - mean).powi(4)) / nf;
    let std = m2.sqrt();
    let (skewness, excess_kurtosis) =
        if m2 > 0.0 { (m3 / (m2 * std), m4 / (m2 * m2) - 3.0) } else { (f64::NAN, f64::NAN) };
    Ok(MomentSummary { n, mean, std, skewness, excess_kurtosis })
}

/// One-pass mergeable accumulator of the first four central moments.
#[derive(Debug, Clone, Copy, Default)]
pub struct MomentAccumulator {
    n: u64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl MomentAccumulator {
    pub fn push(&mut self, x: f64) {
        let n1 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        let delta = x - self.mean;
        let delta_n = delta / n;
        let delta_n2 = delta_n * delta_n;
        let term1 = delta * delta_n * n1;
        self.mean += delta_n;
        self.m4 += term1 * delta_n2 * (n * n - 3.0 * n + 3.0) + 6.0 * delta_n2 * self.m2 - 4.0 * delta_n * self.m3;
        self.m3 += term1 * delta_n * (n - 2.0) - 3.0 * delta_n * self.m2;
        self.m2 += term1;
    }

    pub fn merge(&mut self, o: &MomentAccumulator) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let (na, nb) = (self.n as f64, o.n as f64);
        let n = na + nb;
        let delta = o.mean - self.mean;
        let d2 = delta * delta;
        let d3 = d2 * delta;
        let d4 = d2 * d2;
        let m2 = self.m2 + o.m2 + d2 * na * nb / n;
        let m3 = self.m3 + o.m3 + d3 * na * nb * (na - nb) / (n * n) + 3.0 * delta * (na * o.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + o.m4
            + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * o.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * delta * (na * o.m3 - nb * self.m3) / n;
        self.mean += delta * nb / n;
        self.n += o.n;
        self.m2 = m2;
        self.m3 = m3;
        self.m4 = m4;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn summary(&self) -> Result<MomentSummary, StatsError> {
        if self.n < 4 {
            return Err(StatsError::InsufficientData { needed: 4, got: self.n as usize });
        }
        let n = self.n as f64;
        let var = self.m2 / n;
        let std = var.sqrt();
        let (skewness, excess_kurtosis) = if var > 0.0 {
            ((self.m3 / n) / (var * std), (self.m4 / n) / (var * var) - 3.0)
        } else {
            (f64::NAN, f64::NAN)
        };
        Ok(MomentSummary { n: self.n as usize, mean: self.mean, std, skewness, excess_kurtosis })
    }
}

impl Extend<f64> for MomentAccumulator {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        iter.into_iter().for_each(|x| self.push(x));
    }
}

/// Empirical quantiles at probabilities `(k - 0.5) / q`, k = 1..=q, with
/// linear interpolation between order statistics. `sorted` must be sorted.
pub fn quantiles(sorted: &[f64], q: usize) -> Vec<f64> {
    let n = sorted.len();
    (1..=q)
        .map(|k| {
            let p = (k as f64 - 0.5) / q as f64;
            let h = (p * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let f = h - lo as f64;
            if f == 0.0 {
                sorted[lo]
            } else {
                sorted[lo] + f * (sorted[hi] - sorted[lo])
            }
        })
        .collect()
}

/// Matched quantile pairs of two samples.
pub fn qq_data(a: &[f64], b: &[f64], q: usize) -> Result<Vec<(f64, f64)>, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Argument("qq inputs must be nonempty".into()));
    }
    if q < 2 {
        return Err(StatsError::Argument(format!("quantile count {q} < 2")));
    }
    let sort = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s
    };
    let qa = quantiles(&sort(a), q);
    let qb = quantiles(&sort(b), q);
    Ok(qa.into_iter().zip(qb).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScatterPoint {
    pub index: usize,
    /// Cumulative demeaned change over period A.
    pub x: f64,
    /// Cumulative demeaned change over period B.
    pub y: f64,
    /// Total change over both periods, used as color key.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterSet {
    pub scope: Scope,
    pub period_a: (i32, i32),
    pub period_b: (i32, i32),
    pub points: Vec<ScatterPoint>,
}

/// Builds scatter points from per-period accumulators; a pixel active in
/// neither period is absent, one active in a single period gets 0 for the other.
pub fn scatter_from_accumulators(
    scope: Scope,
    period_a: (i32, i32),
    period_b: (i32, i32),
    a: &ChangeAccumulator,
    b: &ChangeAccumulator,
) -> ScatterSet {
    let points = (0..a.sum().len())
        .filter(|&k| a.count()[k] > 0 || b.count()[k] > 0)
        .map(|k| {
            let (x, y) = (a.sum()[k], b.sum()[k]);
            ScatterPoint { index: k, x, y, total: x + y }
        })
        .collect();
    ScatterSet { scope, period_a, period_b, points }
}

/// Per-pixel cumulative change in two disjoint periods of diff years.
pub fn growth_scatter<S: GridSource + ?Sized>(
    source: &S,
    mask: &RegionMask,
    scope: Scope,
    period_a: (i32, i32),
    period_b: (i32, i32),
) -> Result<ScatterSet, StatsError> {
    for p in [period_a, period_b] {
        if p.0 > p.1 {
            return Err(StatsError::Argument(format!("empty period {}..={}", p.0, p.1)));
        }
    }
    if period_a.0 <= period_b.1 && period_b.0 <= period_a.1 {
        return Err(StatsError::Argument("periods overlap".into()));
    }
    mask.check_geometry(source.geometry()).map_err(PipelineError::from)?;
    mask.validate_scope(scope).map_err(PipelineError::from)?;
    let geometry = *source.geometry();
    let mut acc_a = ChangeAccumulator::new(geometry);
    let mut acc_b = ChangeAccumulator::new(geometry);
    let range = (period_a.0.min(period_b.0), period_a.1.max(period_b.1));
    let within = |p: (i32, i32), y: i32| p.0 <= y && y <= p.1;
    for_each_year(source, Some(range), crate::pipeline::DEFAULT_CHUNK_ROWS, |step: YearStep<'_>| -> Result<(), StatsError> {
        if let Some(diff) = step.diff {
            let y = diff.year();
            if within(period_a, y) {
                acc_a.add(&demean(&diff, mask, scope)?);
            } else if within(period_b, y) {
                acc_b.add(&demean(&diff, mask, scope)?);
            }
        }
        Ok(())
    })?;
    Ok(scatter_from_accumulators(scope, period_a, period_b, &acc_a, &acc_b))
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::Argument(format!("lengths differ: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(StatsError::InsufficientData { needed: 2, got: x.len() });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Reads an external `year,value` series.
pub fn read_series_csv(path: impl AsRef<Path>) -> Result<Vec<(i32, f64)>, StatsError> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| StatsError::Input(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| StatsError::Input(e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["year", "value"] {
        return Err(StatsError::Input(format!("{}: expected header year,value", path.display())));
    }
    let mut out: Vec<(i32, f64)> = rdr
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| StatsError::Input(format!("{}: {e}", path.display())))?;
    out.sort_by_key(|r| r.0);
    Ok(out)
}

//! Aggregate light growth with year fixed effects.
//!
//! Region log totals follow `log L[r,t] = a[r] + b[r]*tau[t] + gamma[t] + e`,
//! fitted by ordinary least squares. The year effects are identified by
//! requiring `sum gamma = 0` and `sum tau*gamma = 0`, which keeps region
//! trends separate from common movements. Growth rates are then read off the
//! residualized logs `log L - gamma`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::grid::{GridError, GridSource};
use crate::regions::{RegionError, RegionMask, Scope};

/// Normalization constraints must hold to this tolerance after a fit.
pub const NORMALIZATION_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum GrowthError {
    #[error("year effects not identified: {0}")]
    Identification(String),
    #[error("log light undefined for {scope} in {year}")]
    Data { scope: Scope, year: i32 },
    #[error("insufficient data: need {needed} growth observations, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("scope {0} has no pixels")]
    EmptyScope(Scope),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Region(#[from] RegionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AggregateEntry {
    pub year: i32,
    pub total_light: u64,
    /// Natural log of the total, `None` when the total is zero.
    pub log_light: Option<f64>,
    pub valid_pixels: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateSeries {
    pub scope: Scope,
    pub entries: Vec<AggregateEntry>,
}

impl AggregateSeries {
    /// Series built directly from log values (synthetic inputs, tests).
    pub fn from_logs(scope: Scope, first_year: i32, logs: &[f64]) -> Self {
        let entries = logs
            .iter()
            .enumerate()
            .map(|(k, &l)| AggregateEntry {
                year: first_year + k as i32,
                total_light: l.exp().round() as u64,
                log_light: Some(l),
                valid_pixels: 0,
            })
            .collect();
        AggregateSeries { scope, entries }
    }

    pub fn log_at(&self, year: i32) -> Option<f64> {
        self.entries.iter().find(|e| e.year == year).and_then(|e| e.log_light)
    }

    pub fn years(&self) -> Vec<i32> {
        self.entries.iter().map(|e| e.year).collect()
    }

    /// Years whose total is zero.
    pub fn undefined_years(&self) -> Vec<i32> {
        self.entries.iter().filter(|e| e.log_light.is_none()).map(|e| e.year).collect()
    }
}

fn entry(year: i32, total: u64, n: u64) -> AggregateEntry {
    AggregateEntry {
        year,
        total_light: total,
        log_light: (total > 0).then(|| (total as f64).ln()),
        valid_pixels: n,
    }
}

/// Per-year sum of valid DN over a scope.
pub fn build_aggregate_series<S: GridSource + ?Sized>(
    source: &S,
    mask: &RegionMask,
    scope: Scope,
) -> Result<AggregateSeries, GrowthError> {
    Ok(build_aggregate_many(source, mask, &[scope])?.remove(0))
}

/// Aggregate series for several scopes in one pass over the panel.
pub fn build_aggregate_many<S: GridSource + ?Sized>(
    source: &S,
    mask: &RegionMask,
    scopes: &[Scope],
) -> Result<Vec<AggregateSeries>, GrowthError> {
    mask.check_geometry(source.geometry())?;
    for &s in scopes {
        mask.validate_scope(s)?;
    }
    let mut pixels = BTreeMap::new();
    for &id in mask.ids() {
        *pixels.entry(id).or_insert(0u64) += 1;
    }
    for &s in scopes {
        if let Scope::Region(id) = s {
            if !pixels.contains_key(&id) {
                return Err(GrowthError::EmptyScope(s));
            }
        }
    }

    let mut out: Vec<AggregateSeries> =
        scopes.iter().map(|&scope| AggregateSeries { scope, entries: Vec::new() }).collect();
    let mut totals = vec![0u64; u16::MAX as usize + 1];
    let mut counts = vec![0u64; u16::MAX as usize + 1];
    for year in source.years() {
        let grid = source.load(year)?;
        totals.iter_mut().for_each(|x| *x = 0);
        counts.iter_mut().for_each(|x| *x = 0);
        let nodata = grid.nodata();
        for (&v, &id) in grid.values().iter().zip(mask.ids()) {
            if v != nodata {
                totals[id as usize] += v as u64;
                counts[id as usize] += 1;
            }
        }
        for series in out.iter_mut() {
            let (t, n) = match series.scope {
                Scope::World => (totals.iter().sum(), counts.iter().sum()),
                Scope::Region(id) => (totals[id as usize], counts[id as usize]),
            };
            series.entries.push(entry(year, t, n));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegionFit {
    #[serde(skip)]
    pub scope: Scope,
    pub intercept: f64,
    /// Per-year slope of log light on centered years.
    pub trend: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct YearEffects {
    pub years: Vec<i32>,
    pub gamma: Vec<f64>,
    pub regions: Vec<RegionFit>,
    pub n_observations: usize,
}

impl YearEffects {
    pub fn gamma_at(&self, year: i32) -> Option<f64> {
        let k = year.checked_sub(*self.years.first()?)?;
        self.gamma.get(usize::try_from(k).ok()?).copied()
    }

    pub fn region(&self, scope: Scope) -> Option<&RegionFit> {
        self.regions.iter().find(|r| r.scope == scope)
    }

    /// Year effects fixed at zero over `years`.
    pub fn zero(years: std::ops::RangeInclusive<i32>) -> Self {
        let years: Vec<i32> = years.collect();
        YearEffects { gamma: vec![0.0; years.len()], years, regions: Vec::new(), n_observations: 0 }
    }
}

/// Two-way least squares with region intercepts and trends and year effects.
///
/// Observations with an undefined log are left out. The year effects are
/// parametrized by second-difference vectors, which span exactly the space
/// with zero sum and zero trend on consecutive years.
pub fn fit_year_effects(all_series: &[AggregateSeries]) -> Result<YearEffects, GrowthError> {
    if all_series.len() < 2 {
        return Err(GrowthError::Identification(format!("{} region(s), need at least 2", all_series.len())));
    }
    let first = all_series.iter().flat_map(|s| s.entries.iter().map(|e| e.year)).min();
    let last = all_series.iter().flat_map(|s| s.entries.iter().map(|e| e.year)).max();
    let (first, last) = match (first, last) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(GrowthError::Identification("no observations".into())),
    };
    let n_years = (last - first + 1) as usize;
    if n_years < 3 {
        return Err(GrowthError::Identification(format!("{n_years} year(s), need at least 3")));
    }
    let r = all_series.len();
    let k = n_years - 2;
    let p = 2 * r + k;
    let tau_mean = (first + last) as f64 / 2.0;

    // Accumulate X'X and X'y one observation at a time; each row has at most
    // 2 + 3 nonzeros.
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut n_obs = 0;
    let mut row: Vec<(usize, f64)> = Vec::with_capacity(5);
    for (ri, s) in all_series.iter().enumerate() {
        for e in &s.entries {
            let Some(y) = e.log_light else { continue };
            let t = (e.year - first) as usize;
            row.clear();
            row.push((2 * ri, 1.0));
            row.push((2 * ri + 1, e.year as f64 - tau_mean));
            // gamma = Z theta with column c of Z = e_c - 2 e_{c+1} + e_{c+2}.
            for (c, w) in [(t as isize, 1.0), (t as isize - 1, -2.0), (t as isize - 2, 1.0)] {
                if c >= 0 && (c as usize) < k {
                    row.push((2 * r + c as usize, w));
                }
            }
            for &(a, xa) in &row {
                xty[a] += xa * y;
                for &(b, xb) in &row {
                    xtx[(a, b)] += xa * xb;
                }
            }
            n_obs += 1;
        }
    }
    if n_obs < p {
        return Err(GrowthError::Identification(format!("{n_obs} observations for {p} parameters")));
    }
    let chol = xtx
        .cholesky()
        .ok_or_else(|| GrowthError::Identification("normal equations are singular".into()))?;
    let beta = chol.solve(&xty);
    if beta.iter().any(|x| !x.is_finite()) {
        return Err(GrowthError::Identification("normal equations are singular".into()));
    }

    let mut gamma = vec![0.0; n_years];
    for c in 0..k {
        let th = beta[2 * r + c];
        gamma[c] += th;
        gamma[c + 1] -= 2.0 * th;
        gamma[c + 2] += th;
    }
    let sum: f64 = gamma.iter().sum();
    let trend: f64 = gamma.iter().enumerate().map(|(t, g)| (first as f64 + t as f64 - tau_mean) * g).sum();
    if sum.abs() > NORMALIZATION_TOL || trend.abs() > NORMALIZATION_TOL {
        return Err(GrowthError::Identification(format!(
            "normalization violated (sum {sum:e}, trend {trend:e})"
        )));
    }
    let regions = all_series
        .iter()
        .enumerate()
        .map(|(ri, s)| RegionFit { scope: s.scope, intercept: beta[2 * ri], trend: beta[2 * ri + 1] })
        .collect();
    Ok(YearEffects { years: (first..=last).collect(), gamma, regions, n_observations: n_obs })
}

/// Removes the mean and linear trend from a series of year effects.
pub fn normalize_year_effects(raw: &[f64]) -> Vec<f64> {
    let t = raw.len();
    if t == 0 {
        return Vec::new();
    }
    let center = (t as f64 - 1.0) / 2.0;
    let mean = raw.iter().sum::<f64>() / t as f64;
    let stt: f64 = (0..t).map(|k| (k as f64 - center).powi(2)).sum();
    let slope = if stt > 0.0 {
        raw.iter().enumerate().map(|(k, g)| (k as f64 - center) * g).sum::<f64>() / stt
    } else {
        0.0
    };
    raw.iter().enumerate().map(|(k, g)| g - mean - slope * (k as f64 - center)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthEstimate {
    #[serde(skip)]
    pub scope: Scope,
    pub period: (i32, i32),
    /// Mean annual residualized growth, percent.
    pub y_hat: f64,
    /// Population standard deviation of annual residualized growth, percent.
    pub sigma_y: f64,
    pub n_years: usize,
}

/// Residualized growth over growth years `a..=b`; year `t` uses the logs of
/// `t-1` and `t`.
pub fn estimate_growth(
    series: &AggregateSeries,
    effects: &YearEffects,
    period: (i32, i32),
) -> Result<GrowthEstimate, GrowthError> {
    let (a, b) = period;
    if a > b {
        return Err(GrowthError::Argument(format!("empty period {a}..={b}")));
    }
    let resid = |year: i32| -> Result<f64, GrowthError> {
        let entry = series
            .entries
            .iter()
            .find(|e| e.year == year)
            .ok_or_else(|| GrowthError::Argument(format!("year {year} not in series for {}", series.scope)))?;
        let log = entry.log_light.ok_or(GrowthError::Data { scope: series.scope, year })?;
        let g = effects
            .gamma_at(year)
            .ok_or_else(|| GrowthError::Argument(format!("no year effect for {year}")))?;
        Ok(log - g)
    };
    let mut g = Vec::with_capacity((b - a + 1) as usize);
    let mut prev = resid(a - 1)?;
    for year in a..=b {
        let curr = resid(year)?;
        g.push(curr - prev);
        prev = curr;
    }
    if g.len() < 2 {
        return Err(GrowthError::InsufficientData { needed: 2, got: g.len() });
    }
    let n = g.len() as f64;
    let mean = g.iter().sum::<f64>() / n;
    let var = g.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(GrowthEstimate { scope: series.scope, period, y_hat: 100.0 * mean, sigma_y: 100.0 * var.sqrt(), n_years: g.len() })
}

//! Three-state growth persistence model.
//!
//! Each demeaned change is classified against the cross-sectional sigma of
//! its year: above `+sigma` is high growth, below `-sigma` is high decay,
//! anything within the closed band is neutral. Transition counts between
//! consecutive years give a row-stochastic matrix (rows = source state); its
//! limit under repeated squaring yields the long-run occupancies whose
//! diagonals are the persistence probabilities.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::grid::{GridGeometry, GridSource};
use crate::pipeline::{demean_scopes, for_each_year, DemeanedDiffGrid, PipelineError, YearStep};
use crate::regions::{RegionMask, Scope};
use crate::stats::cross_sectional_sigma;

/// Max-norm change between successive squarings that counts as converged.
pub const CONVERGENCE_TOL: f64 = 1e-12;
/// Rows of the limit must agree to this tolerance for an ergodic chain.
pub const ROW_EQUALITY_TOL: f64 = 1e-10;
pub const MAX_SQUARINGS: usize = 200;

#[derive(Debug, Error)]
pub enum MarkovError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("state grids for years {prev} and {curr} are not consecutive")]
    Sequencing { prev: i32, curr: i32 },
    #[error("state grids belong to different scopes")]
    ScopeMismatch,
    #[error("no pixel holds a state in both years")]
    EmptyEstimate,
    #[error("transition matrix has an unestimated row")]
    UndefinedChain,
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum GrowthState {
    Neg = 0,
    Neu = 1,
    Pos = 2,
}

impl GrowthState {
    pub const ALL: [GrowthState; 3] = [GrowthState::Neg, GrowthState::Neu, GrowthState::Pos];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(k: usize) -> Option<Self> {
        Self::ALL.get(k).copied()
    }

    /// Classifies a demeaned value against a threshold; `|value| == sigma`
    /// is neutral.
    #[inline]
    pub fn classify(value: f64, sigma: f64) -> Self {
        if value > sigma {
            GrowthState::Pos
        } else if value < -sigma {
            GrowthState::Neg
        } else {
            GrowthState::Neu
        }
    }
}

impl fmt::Display for GrowthState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GrowthState::Neg => "-",
            GrowthState::Neu => "0",
            GrowthState::Pos => "+",
        })
    }
}

/// States of the active in-scope pixels of one year.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGrid {
    geometry: GridGeometry,
    year: i32,
    scope: Scope,
    sigma_used: f64,
    indices: Vec<u32>,
    states: Vec<GrowthState>,
}

impl StateGrid {
    pub fn from_parts(
        geometry: GridGeometry,
        year: i32,
        scope: Scope,
        sigma_used: f64,
        indices: Vec<u32>,
        states: Vec<GrowthState>,
    ) -> Result<Self, MarkovError> {
        if indices.len() != states.len() {
            return Err(MarkovError::Argument("indices and states differ in length".into()));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MarkovError::Argument("indices must be strictly increasing".into()));
        }
        Ok(StateGrid { geometry, year, scope, sigma_used, indices, states })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn year(&self) -> i32 {
        self.year
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn sigma_used(&self) -> f64 {
        self.sigma_used
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn states(&self) -> &[GrowthState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Pixel counts per state, ordered Neg, Neu, Pos.
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        self.states.iter().for_each(|s| c[s.index()] += 1);
        c
    }
}

/// Assigns a growth state to every valued pixel of a demeaned grid.
pub fn classify(d: &DemeanedDiffGrid, sigma: f64) -> Result<StateGrid, MarkovError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(MarkovError::Argument(format!("threshold {sigma} must be finite and >= 0")));
    }
    let states = d.values().iter().map(|&v| GrowthState::classify(v, sigma)).collect();
    Ok(StateGrid {
        geometry: *d.geometry(),
        year: d.year(),
        scope: d.scope(),
        sigma_used: sigma,
        indices: d.indices().to_vec(),
        states,
    })
}

/// Estimated transition probabilities `p[from][to]` for transitions into `year`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionMatrix {
    pub year: i32,
    #[serde(skip)]
    pub scope: Scope,
    pub counts: [[u64; 3]; 3],
    /// Rows without observations are `NaN`.
    pub p: [[f64; 3]; 3],
}

impl TransitionMatrix {
    pub fn from_counts(year: i32, scope: Scope, counts: [[u64; 3]; 3]) -> Self {
        let mut p = [[f64::NAN; 3]; 3];
        for (row, c) in p.iter_mut().zip(&counts) {
            let total: u64 = c.iter().sum();
            if total > 0 {
                for (x, &k) in row.iter_mut().zip(c) {
                    *x = k as f64 / total as f64;
                }
            }
        }
        TransitionMatrix { year, scope, counts, p }
    }

    /// A matrix given directly by its probabilities (no counts).
    pub fn from_probabilities(year: i32, scope: Scope, p: [[f64; 3]; 3]) -> Result<Self, MarkovError> {
        check_stochastic(&p)?;
        Ok(TransitionMatrix { year, scope, counts: [[0; 3]; 3], p })
    }

    pub fn n_transitions(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn prob(&self, from: GrowthState, to: GrowthState) -> f64 {
        self.p[from.index()][to.index()]
    }
}

pub(crate) fn check_stochastic(p: &[[f64; 3]; 3]) -> Result<(), MarkovError> {
    for row in p {
        if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(MarkovError::Argument(format!("row {row:?} has entries outside [0,1]")));
        }
        if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MarkovError::Argument(format!("row {row:?} does not sum to 1")));
        }
    }
    Ok(())
}

/// Counts state pairs over pixels holding a state in both years.
pub fn estimate_transitions(prev: &StateGrid, curr: &StateGrid) -> Result<TransitionMatrix, MarkovError> {
    if curr.year != prev.year + 1 {
        return Err(MarkovError::Sequencing { prev: prev.year, curr: curr.year });
    }
    if curr.scope != prev.scope {
        return Err(MarkovError::ScopeMismatch);
    }
    if curr.geometry != prev.geometry {
        return Err(MarkovError::Argument("state grids have different geometries".into()));
    }
    let mut counts = [[0u64; 3]; 3];
    let (mut a, mut b) = (0, 0);
    while a < prev.indices.len() && b < curr.indices.len() {
        match prev.indices[a].cmp(&curr.indices[b]) {
            std::cmp::Ordering::Less => a += 1,
            std::cmp::Ordering::Greater => b += 1,
            std::cmp::Ordering::Equal => {
                counts[prev.states[a].index()][curr.states[b].index()] += 1;
                a += 1;
                b += 1;
            }
        }
    }
    if counts.iter().flatten().all(|&c| c == 0) {
        return Err(MarkovError::EmptyEstimate);
    }
    Ok(TransitionMatrix::from_counts(curr.year, curr.scope, counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StationaryResult {
    pub year: i32,
    /// Long-run distribution ordered Neg, Neu, Pos.
    pub pi: [f64; 3],
    /// Last iterate of the repeated squaring.
    pub limit: [[f64; 3]; 3],
    pub a_pp: f64,
    pub a_00: f64,
    pub a_mm: f64,
    pub converged: bool,
    /// All rows of the limit agree (single recurrent class).
    pub ergodic: bool,
    pub iterations: usize,
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

fn max_abs_diff(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Limit of `P^n` by repeated squaring and the persistence diagonals.
pub fn stationary(m: &TransitionMatrix) -> Result<StationaryResult, MarkovError> {
    if m.p.iter().flatten().any(|x| x.is_nan()) {
        return Err(MarkovError::UndefinedChain);
    }
    let mut cur = m.p;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < MAX_SQUARINGS {
        let next = mat_mul(&cur, &cur);
        iterations += 1;
        let delta = max_abs_diff(&next, &cur);
        cur = next;
        if delta < CONVERGENCE_TOL {
            converged = true;
            break;
        }
    }
    let row_spread = (0..3)
        .flat_map(|j| (1..3).map(move |i| (i, j)))
        .map(|(i, j)| (cur[i][j] - cur[0][j]).abs())
        .fold(0.0, f64::max);
    let ergodic = converged && row_spread < ROW_EQUALITY_TOL;

    let (pi, diag) = if converged {
        let mut pi = [0.0; 3];
        for (j, p) in pi.iter_mut().enumerate() {
            *p = (cur[0][j] + cur[1][j] + cur[2][j]) / 3.0;
        }
        let s: f64 = pi.iter().sum();
        pi.iter_mut().for_each(|p| *p /= s);
        if !ergodic {
            log::warn!("transition matrix for {} has no unique stationary law; diagonals are not occupancies", m.year);
        }
        (pi, [cur[2][2], cur[1][1], cur[0][0]])
    } else {
        ([f64::NAN; 3], [f64::NAN; 3])
    };
    Ok(StationaryResult {
        year: m.year,
        pi,
        limit: cur,
        a_pp: diag[0],
        a_00: diag[1],
        a_mm: diag[2],
        converged,
        ergodic,
        iterations,
    })
}

/// `a_pp - a_mm`; `NaN` unless the chain converged to a unique law.
pub fn gap(s: &StationaryResult) -> f64 {
    if s.converged && s.ergodic {
        s.a_pp - s.a_mm
    } else {
        f64::NAN
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GapSeries {
    pub scope: Scope,
    pub entries: Vec<(i32, f64)>,
}

pub fn gap_series(scope: Scope, series: &[StationaryResult]) -> GapSeries {
    GapSeries { scope, entries: series.iter().map(|s| (s.year, gap(s))).collect() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PeriodMeans {
    pub a_pp: f64,
    pub a_00: f64,
    pub a_mm: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Means of the diagonals over converged entries with years in `a..=b`.
pub fn period_means(series: &[StationaryResult], period: (i32, i32)) -> PeriodMeans {
    let in_period: Vec<&StationaryResult> =
        series.iter().filter(|s| period.0 <= s.year && s.year <= period.1).collect();
    let usable: Vec<&&StationaryResult> =
        in_period.iter().filter(|s| s.converged && s.a_pp.is_finite() && s.a_mm.is_finite()).collect();
    let skipped = in_period.len() - usable.len();
    if usable.is_empty() {
        return PeriodMeans { a_pp: f64::NAN, a_00: f64::NAN, a_mm: f64::NAN, used: 0, skipped };
    }
    let n = usable.len() as f64;
    let mean = |f: fn(&StationaryResult) -> f64| usable.iter().map(|s| f(s)).sum::<f64>() / n;
    PeriodMeans {
        a_pp: mean(|s| s.a_pp),
        a_00: mean(|s| s.a_00),
        a_mm: mean(|s| s.a_mm),
        used: usable.len(),
        skipped,
    }
}

/// Which cross-sectional sigma sets the classification threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Threshold {
    /// Sigma of the scope itself.
    #[default]
    Local,
    /// Sigma of the world distribution of the same year.
    World,
}

/// Per-year Markov output for one scope.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovYear {
    pub year: i32,
    pub sigma: f64,
    pub matrix: Option<TransitionMatrix>,
    pub stationary: Option<StationaryResult>,
}

/// Carries the previous year's states of one scope through a stream.
#[derive(Debug, Default)]
pub struct MarkovTracker {
    prev: Option<StateGrid>,
}

impl MarkovTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Consumes one year's demeaned grid (or its absence) and threshold.
    pub fn step(&mut self, year: i32, demeaned: Option<&DemeanedDiffGrid>, sigma: f64) -> MarkovYear {
        let states = match demeaned {
            Some(d) if sigma.is_finite() => classify(d, sigma).ok(),
            _ => None,
        };
        let matrix = match (&self.prev, &states) {
            (Some(p), Some(c)) => estimate_transitions(p, c).ok(),
            _ => None,
        };
        let stationary = matrix.as_ref().and_then(|m| stationary(m).ok());
        self.prev = states;
        MarkovYear { year, sigma, matrix, stationary }
    }
}

/// Classification, transition estimate and stationary limit for every diff
/// year of a panel. Years without a defined estimate carry `None`.
pub fn markov_series<S: GridSource + ?Sized>(
    source: &S,
    mask: &RegionMask,
    scope: Scope,
    threshold: Threshold,
) -> Result<Vec<MarkovYear>, MarkovError> {
    mask.check_geometry(source.geometry()).map_err(PipelineError::from)?;
    mask.validate_scope(scope).map_err(PipelineError::from)?;
    let scopes: Vec<Scope> = match (threshold, scope) {
        (Threshold::World, Scope::Region(_)) => vec![scope, Scope::World],
        _ => vec![scope],
    };
    let mut tracker = MarkovTracker::new();
    let mut out = Vec::new();
    for_each_year(source, None, crate::pipeline::DEFAULT_CHUNK_ROWS, |step: YearStep<'_>| -> Result<(), MarkovError> {
        let Some(diff) = step.diff else { return Ok(()) };
        let results = demean_scopes(&diff, mask, &scopes);
        let own = results[0].as_ref().ok();
        let sigma_src = results.last().unwrap().as_ref().ok();
        let sigma = sigma_src.and_then(|d| cross_sectional_sigma(d).ok()).map_or(f64::NAN, |s| s.0);
        out.push(tracker.step(diff.year(), own, sigma));
        Ok(())
    })?;
    Ok(out)
}

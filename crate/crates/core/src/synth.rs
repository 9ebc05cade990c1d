//! Synthetic panels with planted dynamics.
//!
//! Randomness is counter-based: every draw is addressed by (seed, year,
//! pixel) through ChaCha8 stream and word positions, so output does not
//! depend on thread count or row chunking.
//!
//! In the default mode each pixel is active in a year with probability
//! `active_fraction`; an active pixel moves by a signed magnitude drawn from
//! a discrete half-normal on `1..=31` whose second moment is `sigma^2`. A move
//! that would leave `[0, 63]` is reflected, which keeps the magnitude (and so
//! the planted dispersion) intact. In Markov mode every pixel carries a
//! hidden growth state evolving under a planted kernel; neutral pixels move
//! by one DN and high growth / decay pixels by `+-jump`.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::grid::{write_raster, GridError, GridGeometry, Panel, RasterGrid, MAX_DN, NODATA};
use crate::growth::{normalize_year_effects, AggregateSeries};
use crate::keyval::{parse_key_values, parse_list};
use crate::markov::{check_stochastic, stationary, GrowthState, StateGrid, TransitionMatrix};
use crate::regions::{write_mask, Region, RegionError, RegionKind, RegionMask, Scope};

/// Largest change magnitude; with a base inside `[0, 63]` one of `+-m` always fits.
pub const MAX_MAGNITUDE: u8 = 31;
/// Generation fails when more than this fraction of moves is clipped.
pub const MAX_CLIP_RATE: f64 = 0.01;

const INIT_STREAM: u64 = 1 << 40;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("spec: {0}")]
    Spec(String),
    #[error("infeasible spec: {0}")]
    Feasibility(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("year {year}: clipping rate {rate:.4} exceeds {MAX_CLIP_RATE}")]
    Clipping { year: i32, rate: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error("{0}")]
    Io(String),
}

/// Discrete half-normal on `1..=31` with `P(m) ~ exp(-m^2 / (2 tau^2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeLaw {
    pub tau: f64,
    cdf: [f64; MAX_MAGNITUDE as usize],
}

impl MagnitudeLaw {
    fn with_tau(tau: f64) -> Self {
        let mut w = [0.0; MAX_MAGNITUDE as usize];
        for (k, x) in w.iter_mut().enumerate() {
            let m = (k + 1) as f64;
            *x = (-(m * m - 1.0) / (2.0 * tau * tau)).exp();
        }
        let total: f64 = w.iter().sum();
        let mut acc = 0.0;
        for x in w.iter_mut() {
            acc += *x / total;
            *x = acc;
        }
        w[MAX_MAGNITUDE as usize - 1] = 1.0;
        MagnitudeLaw { tau, cdf: w }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.cdf
            .iter()
            .map(|&c| {
                let p = c - prev;
                prev = c;
                p
            })
            .collect()
    }

    pub fn second_moment(&self) -> f64 {
        self.probabilities().iter().enumerate().map(|(k, p)| ((k + 1) * (k + 1)) as f64 * p).sum()
    }

    /// Largest attainable root mean square (the uniform law as `tau -> inf`).
    pub fn max_rms() -> f64 {
        let n = MAX_MAGNITUDE as f64;
        ((n + 1.0) * (2.0 * n + 1.0) / 6.0).sqrt()
    }

    /// The law whose second moment is `s^2`, found by bisection on `ln tau`.
    pub fn for_rms(s: f64) -> Result<Self, SynthError> {
        let max = Self::max_rms();
        if !(s >= 1.0) || s >= max - 1e-6 || !s.is_finite() {
            return Err(SynthError::Feasibility(format!(
                "dispersion {s} outside the attainable range [1, {max:.3}) for DN changes of 1..={MAX_MAGNITUDE}"
            )));
        }
        let target = s * s;
        let (mut lo, mut hi) = (-8.0f64, 12.0f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if Self::with_tau(mid.exp()).second_moment() < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(Self::with_tau((0.5 * (lo + hi)).exp()))
    }

    #[inline]
    fn sample(&self, u: f64) -> u8 {
        self.cdf.iter().position(|&c| u < c).unwrap_or(MAX_MAGNITUDE as usize - 1) as u8 + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelSpec {
    pub geometry: GridGeometry,
    pub first_year: i32,
    pub n_years: usize,
    /// Per diff year; ignored in Markov mode, where every pixel moves.
    pub active_fraction: Vec<f64>,
    /// Planted dispersion `s(t)` per diff year; ignored in Markov mode.
    pub sigma: Vec<f64>,
    /// Common DN shift added to every move, per diff year.
    pub drift: Vec<i16>,
    pub base_dn: u8,
    pub kernel: Option<[[f64; 3]; 3]>,
    pub jump: u8,
    /// Number of column-band regions; 0 for a world-only mask.
    pub regions: u16,
    pub seed: u64,
}

impl PanelSpec {
    /// Defaults: active fraction 0.25, constant dispersion 2, base DN 20.
    pub fn new(geometry: GridGeometry, first_year: i32, n_years: usize) -> Self {
        let k = n_years.saturating_sub(1);
        PanelSpec {
            geometry,
            first_year,
            n_years,
            active_fraction: vec![0.25; k],
            sigma: vec![2.0; k],
            drift: vec![0; k],
            base_dn: 20,
            kernel: None,
            jump: 6,
            regions: 0,
            seed: 0,
        }
    }

    pub fn diff_years(&self) -> impl Iterator<Item = i32> + '_ {
        (1..self.n_years).map(move |k| self.first_year + k as i32)
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let k = self.n_years.saturating_sub(1);
        if self.n_years == 0 {
            return Err(SynthError::Spec("at least one year required".into()));
        }
        for (name, len) in [("active_fraction", self.active_fraction.len()), ("sigma", self.sigma.len()), ("drift", self.drift.len())] {
            if len != k {
                return Err(SynthError::Spec(format!("{name} has {len} entries for {k} diff years")));
            }
        }
        if self.base_dn > MAX_DN {
            return Err(SynthError::Spec(format!("base DN {} above {MAX_DN}", self.base_dn)));
        }
        if self.regions as usize > self.geometry.width {
            return Err(SynthError::Spec(format!("{} regions for {} columns", self.regions, self.geometry.width)));
        }
        match self.kernel {
            Some(p) => {
                check_stochastic(&p).map_err(|e| SynthError::Argument(e.to_string()))?;
                if !(1..=MAX_MAGNITUDE).contains(&self.jump) {
                    return Err(SynthError::Spec(format!("jump {} outside 1..={MAX_MAGNITUDE}", self.jump)));
                }
            }
            None => {
                for &f in &self.active_fraction {
                    if !(f > 0.0 && f <= 1.0) {
                        return Err(SynthError::Spec(format!("active fraction {f} outside (0, 1]")));
                    }
                }
                for &s in &self.sigma {
                    MagnitudeLaw::for_rms(s)?;
                }
            }
        }
        Ok(())
    }

    /// Parses a `key = value` spec. Schedules accept a constant, a
    /// comma list (one entry per diff year) or `start..end` for a linear ramp.
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let kv = parse_key_values(text).map_err(SynthError::Spec)?;
        let get = |k: &str| kv.get(k).map(String::as_str);
        let num = |k: &str| -> Result<Option<f64>, SynthError> {
            get(k).map(|v| v.parse::<f64>().map_err(|_| SynthError::Spec(format!("{k}: bad number {v:?}")))).transpose()
        };
        for key in kv.keys() {
            if !SPEC_KEYS.contains(&key.as_str()) {
                return Err(SynthError::Spec(format!("unknown key {key:?}")));
            }
        }
        let width = num("width")?.ok_or_else(|| SynthError::Spec("width is required".into()))? as usize;
        let height = num("height")?.ok_or_else(|| SynthError::Spec("height is required".into()))? as usize;
        let lon_min = num("lon_min")?.unwrap_or(-180.0);
        let lon_max = num("lon_max")?.unwrap_or(180.0);
        let cell = (lon_max - lon_min) / width.max(1) as f64;
        let lat_max = num("lat_max")?.unwrap_or(75.0);
        let lat_min = num("lat_min")?.unwrap_or(lat_max - height as f64 * cell);
        let geometry = GridGeometry::new(width, height, lon_min, lon_max, lat_min, lat_max)?;
        let first_year = num("first_year")?.unwrap_or(1992.0) as i32;
        let n_years = num("years")?.ok_or_else(|| SynthError::Spec("years is required".into()))? as usize;
        let mut spec = PanelSpec::new(geometry, first_year, n_years);
        let k = n_years.saturating_sub(1);
        if let Some(v) = get("active_fraction") {
            spec.active_fraction = parse_schedule(v, k)?;
        }
        if let Some(v) = get("sigma") {
            spec.sigma = parse_schedule(v, k)?;
        }
        if let Some(v) = get("drift") {
            spec.drift = parse_schedule(v, k)?.into_iter().map(|x| x.round() as i16).collect();
        }
        if let Some(v) = num("base_dn")? {
            spec.base_dn = v as u8;
        }
        if let Some(v) = num("jump")? {
            spec.jump = v as u8;
        }
        if let Some(v) = num("regions")? {
            spec.regions = v as u16;
        }
        if let Some(v) = get("seed") {
            spec.seed = v.parse().map_err(|_| SynthError::Spec(format!("seed: bad value {v:?}")))?;
        }
        if let Some(v) = get("kernel") {
            let p: Vec<f64> = parse_list(v).map_err(SynthError::Spec)?;
            if p.len() != 9 {
                return Err(SynthError::Spec(format!("kernel needs 9 entries, got {}", p.len())));
            }
            spec.kernel = Some([[p[0], p[1], p[2]], [p[3], p[4], p[5]], [p[6], p[7], p[8]]]);
        }
        spec.validate()?;
        Ok(spec)
    }
}

const SPEC_KEYS: &[&str] = &[
    "width", "height", "lon_min", "lon_max", "lat_min", "lat_max", "first_year", "years", "active_fraction", "sigma",
    "drift", "base_dn", "jump", "regions", "seed", "kernel",
];

fn parse_schedule(v: &str, k: usize) -> Result<Vec<f64>, SynthError> {
    if let Some((a, b)) = v.split_once("..") {
        let a: f64 = a.trim().parse().map_err(|_| SynthError::Spec(format!("bad ramp {v:?}")))?;
        let b: f64 = b.trim().parse().map_err(|_| SynthError::Spec(format!("bad ramp {v:?}")))?;
        return Ok(linear_schedule(a, b, k));
    }
    let xs: Vec<f64> = parse_list(v).map_err(SynthError::Spec)?;
    match xs.len() {
        1 => Ok(vec![xs[0]; k]),
        n if n == k => Ok(xs),
        n => Err(SynthError::Spec(format!("schedule {v:?} has {n} entries for {k} diff years"))),
    }
}

/// `k` evenly spaced values from `a` to `b` inclusive.
pub fn linear_schedule(a: f64, b: f64, k: usize) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..k).map(|i| a + (b - a) * i as f64 / (k - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct YearTruth {
    pub year: i32,
    /// Planted dispersion; in Markov mode the stationary mixture value.
    pub sigma: f64,
    pub active_fraction: f64,
    pub drift: i16,
    pub tau: Option<f64>,
    pub active: u64,
    pub reflected: u64,
    pub clipped: u64,
    pub clip_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub first_year: i32,
    pub n_years: usize,
    pub base_dn: u8,
    pub kernel: Option<[[f64; 3]; 3]>,
    /// Stationary law of the kernel, ordered Neg, Neu, Pos.
    pub kernel_stationary: Option<[f64; 3]>,
    pub jump: Option<u8>,
    pub regions: u16,
    pub years: Vec<YearTruth>,
}

impl GroundTruth {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ground truth serializes")
    }
}

#[inline]
fn unit_u32(x: u32) -> f64 {
    (x as f64 + 0.5) / 4_294_967_296.0
}

#[inline]
fn unit_u64(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

fn stream_rng(seed: u64, stream: u64, word: u128) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r.set_word_pos(word);
    r
}

fn next_state(row: &[f64; 3], u: f64) -> u8 {
    if u < row[0] {
        0
    } else if u < row[0] + row[1] {
        1
    } else {
        2
    }
}

#[derive(Default, Clone, Copy)]
struct Tally {
    active: u64,
    reflected: u64,
    clipped: u64,
}

impl std::ops::Add for Tally {
    type Output = Tally;
    fn add(self, o: Tally) -> Tally {
        Tally { active: self.active + o.active, reflected: self.reflected + o.reflected, clipped: self.clipped + o.clipped }
    }
}

/// Applies `step` to `dn`, reflecting the random part when the result
/// leaves the DN range and clipping only when both directions fail.
#[inline]
fn apply(dn: u8, drift: i16, signed: i16, reflect: bool, t: &mut Tally) -> u8 {
    let max = MAX_DN as i16;
    let mut v = dn as i16 + drift + signed;
    if !(0..=max).contains(&v) && reflect {
        let alt = dn as i16 + drift - signed;
        if (0..=max).contains(&alt) {
            t.reflected += 1;
            v = alt;
        }
    }
    if !(0..=max).contains(&v) {
        t.clipped += 1;
        v = v.clamp(0, max);
    }
    if v != dn as i16 {
        t.active += 1;
    }
    v as u8
}

/// Year-by-year panel generator holding only the current grid.
pub struct PanelGenerator {
    spec: PanelSpec,
    laws: Vec<Option<MagnitudeLaw>>,
    current: Option<RasterGrid>,
    states: Option<Vec<u8>>,
    next_year: usize,
    truth: GroundTruth,
}

impl PanelGenerator {
    pub fn new(spec: PanelSpec) -> Result<Self, SynthError> {
        spec.validate()?;
        let laws = if spec.kernel.is_some() {
            vec![None; spec.n_years - 1]
        } else {
            spec.sigma.iter().map(|&s| MagnitudeLaw::for_rms(s).map(Some)).collect::<Result<_, _>>()?
        };
        let kernel_stationary = match spec.kernel {
            Some(p) => {
                let m = TransitionMatrix::from_probabilities(0, Scope::World, p).map_err(|e| SynthError::Argument(e.to_string()))?;
                let s = stationary(&m).map_err(|e| SynthError::Argument(e.to_string()))?;
                if !s.converged {
                    return Err(SynthError::Argument("kernel has no limiting distribution".into()));
                }
                Some(s.pi)
            }
            None => None,
        };
        let truth = GroundTruth {
            seed: spec.seed,
            width: spec.geometry.width,
            height: spec.geometry.height,
            first_year: spec.first_year,
            n_years: spec.n_years,
            base_dn: spec.base_dn,
            kernel: spec.kernel,
            kernel_stationary,
            jump: spec.kernel.map(|_| spec.jump),
            regions: spec.regions,
            years: Vec::new(),
        };
        Ok(PanelGenerator { spec, laws, current: None, states: None, next_year: 0, truth })
    }

    pub fn spec(&self) -> &PanelSpec {
        &self.spec
    }

    /// Ground truth for the years generated so far.
    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn into_truth(self) -> GroundTruth {
        self.truth
    }

    /// Produces the next year's grid, or `None` after the last year.
    pub fn advance(&mut self) -> Result<Option<&RasterGrid>, SynthError> {
        if self.next_year >= self.spec.n_years {
            return Ok(None);
        }
        let year = self.spec.first_year + self.next_year as i32;
        let g = self.spec.geometry;
        let grid = match self.current.take() {
            None => {
                if self.spec.kernel.is_some() {
                    self.states = Some(self.initial_states());
                }
                RasterGrid::filled(g, year, self.spec.base_dn)?
            }
            Some(prev) => {
                let k = self.next_year - 1;
                let mut values = prev.into_values();
                let tally = self.step(k, &mut values);
                let n = g.pixel_count() as f64;
                let (sigma, tau, af) = match (&self.laws[k], self.truth.kernel_stationary) {
                    (Some(law), _) => (self.spec.sigma[k], Some(law.tau), self.spec.active_fraction[k]),
                    (None, Some(pi)) => {
                        let j2 = (self.spec.jump as f64).powi(2);
                        (((pi[0] + pi[2]) * j2 + pi[1]).sqrt(), None, 1.0)
                    }
                    (None, None) => unreachable!("validated spec has a law or a kernel"),
                };
                let moves = if self.spec.kernel.is_some() { n } else { (af * n).max(1.0) };
                let yt = YearTruth {
                    year,
                    sigma,
                    active_fraction: af,
                    drift: self.spec.drift[k],
                    tau,
                    active: tally.active,
                    reflected: tally.reflected,
                    clipped: tally.clipped,
                    clip_rate: tally.clipped as f64 / moves,
                };
                let rate = yt.clip_rate;
                self.truth.years.push(yt);
                if rate > MAX_CLIP_RATE {
                    return Err(SynthError::Clipping { year, rate });
                }
                RasterGrid::new(g, year, values, NODATA)?
            }
        };
        self.next_year += 1;
        self.current = Some(grid);
        Ok(self.current.as_ref())
    }

    fn initial_states(&self) -> Vec<u8> {
        let pi = self.truth.kernel_stationary.expect("kernel mode");
        let w = self.spec.geometry.width;
        let mut states = vec![0u8; self.spec.geometry.pixel_count()];
        states.par_chunks_mut(w).enumerate().for_each(|(row, out)| {
            let mut rng = stream_rng(self.spec.seed, INIT_STREAM, (row * w) as u128);
            for s in out.iter_mut() {
                *s = next_state(&pi, unit_u32(rng.next_u32()));
            }
        });
        states
    }

    fn step(&mut self, k: usize, values: &mut [u8]) -> Tally {
        let w = self.spec.geometry.width;
        let seed = self.spec.seed;
        let drift = self.spec.drift[k];
        let (s_main, s_detail) = (2 * k as u64, 2 * k as u64 + 1);
        match (&self.laws[k], self.spec.kernel) {
            (Some(law), _) => {
                let thr = (self.spec.active_fraction[k] * 4_294_967_296.0).round() as u64;
                values
                    .par_chunks_mut(w)
                    .enumerate()
                    .map(|(row, out)| {
                        let mut t = Tally::default();
                        let base = row * w;
                        let mut gate = stream_rng(seed, s_main, base as u128);
                        let mut detail = stream_rng(seed, s_detail, 0);
                        for (i, dn) in out.iter_mut().enumerate() {
                            if (gate.next_u32() as u64) >= thr {
                                continue;
                            }
                            detail.set_word_pos(4 * (base + i) as u128);
                            let m = law.sample(unit_u64(detail.next_u64())) as i16;
                            let signed = if detail.next_u32() & 1 == 0 { m } else { -m };
                            *dn = apply(*dn, drift, signed, true, &mut t);
                        }
                        t
                    })
                    .reduce(Tally::default, |a, b| a + b)
            }
            (None, Some(p)) => {
                let jump = self.spec.jump as i16;
                let states = self.states.as_mut().expect("kernel mode keeps states");
                values
                    .par_chunks_mut(w)
                    .zip(states.par_chunks_mut(w))
                    .enumerate()
                    .map(|(row, (out, st))| {
                        let mut t = Tally::default();
                        let mut gate = stream_rng(seed, s_main, (row * w) as u128);
                        let mut detail = stream_rng(seed, s_detail, (row * w) as u128);
                        for (dn, s) in out.iter_mut().zip(st.iter_mut()) {
                            *s = next_state(&p[*s as usize], unit_u32(gate.next_u32()));
                            let sign_bit = detail.next_u32() & 1;
                            let signed = match *s {
                                0 => -jump,
                                2 => jump,
                                _ if sign_bit == 0 => 1,
                                _ => -1,
                            };
                            *dn = apply(*dn, drift, signed, false, &mut t);
                        }
                        t
                    })
                    .reduce(Tally::default, |a, b| a + b)
            }
            (None, None) => unreachable!("validated spec has a law or a kernel"),
        }
    }

    /// Hidden states of the current year (Markov mode).
    pub fn states(&self) -> Option<&[u8]> {
        self.states.as_deref()
    }
}

/// Region mask of `regions` equal column bands named `R01`, `R02`, ...
pub fn band_mask(geometry: GridGeometry, regions: u16) -> Result<RegionMask, SynthError> {
    if regions == 0 {
        return Ok(RegionMask::world_only(geometry));
    }
    let w = geometry.width;
    let r = regions as usize;
    let ids: Vec<u16> = (0..geometry.pixel_count()).map(|k| (1 + (k % w) * r / w) as u16).collect();
    let table = (1..=regions)
        .map(|id| Region { id, name: format!("R{id:02}"), kind: RegionKind::Country })
        .collect();
    Ok(RegionMask::new(geometry, ids, table)?)
}

/// Generates a whole panel in memory.
pub fn gen_panel(spec: &PanelSpec) -> Result<(Panel, RegionMask, GroundTruth), SynthError> {
    let mask = band_mask(spec.geometry, spec.regions)?;
    let mut gen = PanelGenerator::new(spec.clone())?;
    let mut grids = Vec::with_capacity(spec.n_years);
    while let Some(g) = gen.advance()? {
        grids.push(g.clone());
    }
    Ok((Panel::new(grids)?, mask, gen.into_truth()))
}

/// Streams a panel to `dir` as `<year>.nlg` files plus `mask.rmsk`,
/// `regions.csv` and `ground_truth.json`.
pub fn write_panel(spec: &PanelSpec, dir: impl AsRef<Path>) -> Result<GroundTruth, SynthError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| SynthError::Io(format!("{}: {e}", dir.display())))?;
    let mask = band_mask(spec.geometry, spec.regions)?;
    write_mask(&mask, dir.join("mask.rmsk"), dir.join("regions.csv"))?;
    drop(mask);
    let mut gen = PanelGenerator::new(spec.clone())?;
    while let Some(g) = gen.advance()? {
        write_raster(g, dir.join(format!("{}.nlg", g.year())))?;
    }
    let truth = gen.into_truth();
    let path = dir.join("ground_truth.json");
    fs::write(&path, truth.to_json()).map_err(|e| SynthError::Io(format!("{}: {e}", path.display())))?;
    Ok(truth)
}

/// State paths of independent pixels, year-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMatrix {
    pub n_pixels: usize,
    pub n_years: usize,
    pub states: Vec<GrowthState>,
}

impl StateMatrix {
    pub fn year(&self, t: usize) -> &[GrowthState] {
        &self.states[t * self.n_pixels..(t + 1) * self.n_pixels]
    }

    pub fn path(&self, pixel: usize) -> Vec<GrowthState> {
        (0..self.n_years).map(|t| self.states[t * self.n_pixels + pixel]).collect()
    }

    /// Year `t` as a state grid on an `n_pixels x 1` lattice.
    pub fn state_grid(&self, t: usize, first_year: i32) -> StateGrid {
        let g = GridGeometry::new(self.n_pixels, 1, 0.0, self.n_pixels as f64, 0.0, 1.0).expect("nonzero pixel count");
        StateGrid::from_parts(g, first_year + t as i32, Scope::World, f64::NAN, (0..self.n_pixels as u32).collect(), self.year(t).to_vec())
            .expect("indices are sorted")
    }
}

/// Markov paths under `p`, each started from its stationary law.
pub fn gen_state_sequences(p: &[[f64; 3]; 3], n_pixels: usize, n_years: usize, seed: u64) -> Result<StateMatrix, SynthError> {
    check_stochastic(p).map_err(|e| SynthError::Argument(e.to_string()))?;
    if n_pixels == 0 || n_years == 0 {
        return Err(SynthError::Argument("need at least one pixel and one year".into()));
    }
    let m = TransitionMatrix::from_probabilities(0, Scope::World, *p).map_err(|e| SynthError::Argument(e.to_string()))?;
    let st = stationary(&m).map_err(|e| SynthError::Argument(e.to_string()))?;
    if !st.converged {
        return Err(SynthError::Argument("kernel has no limiting distribution".into()));
    }
    let mut raw = vec![0u8; n_pixels * n_years];
    for t in 0..n_years {
        let (before, rest) = raw.split_at_mut(t * n_pixels);
        let prev = t.checked_sub(1).map(|s| &before[s * n_pixels..]);
        let row = &mut rest[..n_pixels];
        row.par_chunks_mut(4096).enumerate().for_each(|(c, out)| {
            let mut rng = stream_rng(seed, t as u64, (c * 4096) as u128);
            for (i, s) in out.iter_mut().enumerate() {
                let u = unit_u32(rng.next_u32());
                *s = match prev {
                    None => next_state(&st.pi, u),
                    Some(pr) => next_state(&p[pr[c * 4096 + i] as usize], u),
                };
            }
        });
    }
    let states = raw.into_iter().map(|s| GrowthState::from_index(s as usize).unwrap()).collect();
    Ok(StateMatrix { n_pixels, n_years, states })
}

/// Aggregate log-light series with planted region trends and year effects.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthPanel {
    pub series: Vec<AggregateSeries>,
    /// Normalized (zero sum, zero trend) year effects.
    pub gamma: Vec<f64>,
    pub trends: Vec<f64>,
    /// Per-region, per-year noise that was added.
    pub noise: Vec<Vec<f64>>,
}

pub fn gen_growth_series(
    trends: &[f64],
    first_year: i32,
    n_years: usize,
    gamma_scale: f64,
    noise_sd: f64,
    seed: u64,
) -> GrowthPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..n_years).map(|_| gamma_scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    let gamma = normalize_year_effects(&raw);
    let mut noise = Vec::with_capacity(trends.len());
    let series = trends
        .iter()
        .enumerate()
        .map(|(r, &b)| {
            let eps: Vec<f64> = (0..n_years).map(|_| noise_sd * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
            let logs: Vec<f64> =
                (0..n_years).map(|t| 10.0 + 0.5 * r as f64 + b * t as f64 + gamma[t] + eps[t]).collect();
            noise.push(eps);
            AggregateSeries::from_logs(Scope::Region(r as u16 + 1), first_year, &logs)
        })
        .collect();
    GrowthPanel { series, gamma, trends: trends.to_vec(), noise }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::estimate_transitions;
    use crate::pipeline::demean;
    use crate::pipeline::diff_year;
    use crate::stats::cross_sectional_sigma;

    fn small(w: usize, h: usize, years: usize) -> PanelSpec {
        PanelSpec::new(GridGeometry::new(w, h, 0.0, w as f64, 0.0, h as f64).unwrap(), 2000, years)
    }

    #[test]
    fn magnitude_law_hits_second_moment() {
        for s in [1.2, 2.0, 3.5, 5.0, 12.0] {
            let law = MagnitudeLaw::for_rms(s).unwrap();
            assert!((law.second_moment() - s * s).abs() < 1e-9, "{s}");
            let p = law.probabilities();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(matches!(MagnitudeLaw::for_rms(0.5), Err(SynthError::Feasibility(_))));
        assert!(matches!(MagnitudeLaw::for_rms(19.0), Err(SynthError::Feasibility(_))));
    }

    #[test]
    fn same_seed_same_panel() {
        let mut spec = small(40, 30, 4);
        spec.seed = 99;
        let (a, _, ta) = gen_panel(&spec).unwrap();
        let (b, _, tb) = gen_panel(&spec).unwrap();
        assert_eq!(a.grids(), b.grids());
        assert_eq!(ta, tb);
        spec.seed = 100;
        let (c, _, _) = gen_panel(&spec).unwrap();
        assert_ne!(a.grids()[3], c.grids()[3]);
    }

    #[test]
    fn thread_count_does_not_matter() {
        let mut spec = small(64, 50, 3);
        spec.kernel = None;
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| gen_panel(&spec).unwrap().0)
        };
        assert_eq!(run(1).grids(), run(3).grids());
    }

    #[test]
    fn planted_sigma_recovered() {
        let mut spec = small(400, 250, 3);
        spec.active_fraction = vec![1.0, 1.0];
        spec.sigma = vec![2.0, 4.0];
        spec.seed = 5;
        let (panel, mask, truth) = gen_panel(&spec).unwrap();
        for (k, yt) in truth.years.iter().enumerate() {
            let d = diff_year(&panel.grids()[k], &panel.grids()[k + 1]).unwrap();
            let dm = demean(&d, &mask, Scope::World).unwrap();
            let (sigma, n) = cross_sectional_sigma(&dm).unwrap();
            let tol = 3.0 / (2.0 * n as f64).sqrt();
            assert!((sigma / yt.sigma - 1.0).abs() < tol, "{sigma} vs {}", yt.sigma);
            assert_eq!(yt.clipped, 0);
        }
    }

    #[test]
    fn tiny_fraction_can_leave_a_year_inactive() {
        let mut spec = small(10, 10, 2);
        spec.active_fraction = vec![1e-9];
        let (panel, _, truth) = gen_panel(&spec).unwrap();
        assert_eq!(truth.years[0].active, 0);
        assert_eq!(panel.grids()[0].values(), panel.grids()[1].values());
    }

    #[test]
    fn spec_text_round() {
        let spec = PanelSpec::parse(
            "# demo\nwidth = 36\nheight = 14\nyears = 4\nsigma = 5.0..2.0\nactive_fraction = 0.5\nregions = 3\nseed = 42\n",
        )
        .unwrap();
        assert_eq!(spec.sigma, vec![5.0, 3.5, 2.0]);
        assert_eq!(spec.geometry.cell_size(), 10.0);
        assert_eq!(spec.geometry.lat_min, 75.0 - 140.0);
        assert_eq!(spec.regions, 3);
        assert!(PanelSpec::parse("width = 4\nheight = 4\nyears = 3\nsigma = 40").is_err());
        assert!(PanelSpec::parse("width = 4\nheight = 4\nyears = 3\ncolour = red").is_err());
        let bad_kernel = "width = 4\nheight = 4\nyears = 3\nkernel = 0.5,0.5,0,0,1,0,0,0,0.9";
        assert!(PanelSpec::parse(bad_kernel).is_err());
    }

    #[test]
    fn band_mask_partitions_columns() {
        let g = GridGeometry::new(10, 2, 0.0, 10.0, 0.0, 2.0).unwrap();
        let m = band_mask(g, 3).unwrap();
        assert_eq!(&m.ids()[..10], &[1, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
        assert_eq!(m.table().len(), 3);
    }

    #[test]
    fn identity_kernel_paths_are_constant() {
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let m = gen_state_sequences(&id, 500, 5, 3).unwrap();
        for px in 0..500 {
            let p = m.path(px);
            assert!(p.iter().all(|&s| s == p[0]));
        }
    }

    #[test]
    fn rank_one_kernel_frequencies() {
        let row = [0.2, 0.5, 0.3];
        let m = gen_state_sequences(&[row; 3], 100_000, 3, 8).unwrap();
        for t in 0..3 {
            let mut c = [0usize; 3];
            m.year(t).iter().for_each(|s| c[s.index()] += 1);
            for j in 0..3 {
                let f = c[j] as f64 / 1e5;
                assert!((f - row[j]).abs() < 4.0 * (row[j] * (1.0 - row[j]) / 1e5).sqrt());
            }
        }
        assert!(gen_state_sequences(&[[0.5, 0.6, 0.0]; 3], 10, 2, 0).is_err());
    }

    #[test]
    fn markov_panel_states_drive_changes() {
        let mut spec = small(200, 100, 3);
        spec.base_dn = 32;
        spec.kernel = Some([[0.5, 0.5, 0.0], [0.25, 0.5, 0.25], [0.0, 0.5, 0.5]]);
        let mut gen = PanelGenerator::new(spec).unwrap();
        let mut grids = Vec::new();
        let mut states = Vec::new();
        while let Some(g) = gen.advance().unwrap() {
            grids.push(g.clone());
            states.push(gen.states().unwrap().to_vec());
        }
        for k in 1..3 {
            for ((a, b), &s) in grids[k - 1].values().iter().zip(grids[k].values()).zip(&states[k]) {
                let d = *b as i16 - *a as i16;
                match s {
                    0 => assert_eq!(d, -6),
                    2 => assert_eq!(d, 6),
                    _ => assert_eq!(d.abs(), 1),
                }
            }
        }
        assert!(gen.truth().years.iter().all(|y| y.clipped == 0));
    }

    #[test]
    fn state_grids_feed_the_estimator() {
        let p = [[0.6, 0.3, 0.1], [0.2, 0.6, 0.2], [0.1, 0.4, 0.5]];
        let m = gen_state_sequences(&p, 50_000, 2, 1).unwrap();
        let est = estimate_transitions(&m.state_grid(0, 2000), &m.state_grid(1, 2000)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((est.p[i][j] - p[i][j]).abs() < 0.02);
            }
        }
    }

    #[test]
    fn growth_series_normalized_gamma() {
        let gp = gen_growth_series(&[0.01, 0.02], 1992, 22, 0.05, 0.0, 4);
        assert!(gp.gamma.iter().sum::<f64>().abs() < 1e-12);
        let c = 10.5;
        assert!(gp.gamma.iter().enumerate().map(|(k, g)| (k as f64 - c) * g).sum::<f64>().abs() < 1e-12);
        assert_eq!(gp.series[1].entries.len(), 22);
    }

    #[test]
    fn write_panel_streams_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = small(20, 10, 3);
        spec.regions = 2;
        let truth = write_panel(&spec, dir.path()).unwrap();
        for y in 2000..2003 {
            assert!(dir.path().join(format!("{y}.nlg")).exists());
        }
        let js: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("ground_truth.json")).unwrap()).unwrap();
        assert_eq!(js["years"].as_array().unwrap().len(), truth.years.len());
        let (panel, _, _) = gen_panel(&spec).unwrap();
        let dirp = crate::grid::PanelDir::open(dir.path()).unwrap();
        use crate::grid::GridSource;
        assert_eq!(dirp.load(2002).unwrap().as_ref(), &panel.grids()[2]);
    }
}

//! Run configuration, the streaming run engine and report formatting.
//!
//! A run makes a single pass over the panel. Each year pair is differenced
//! once and demeaned for every scope; dispersion, Markov states, period
//! accumulators and aggregate totals are updated from that one pass, and all
//! artifacts are written at the end.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::json;
use thiserror::Error;

use crate::grid::{GridGeometry, GridSource, PanelDir};
use crate::growth::{estimate_growth, fit_year_effects, AggregateEntry, AggregateSeries, GrowthEstimate, YearEffects};
use crate::keyval::{parse_key_values, parse_list, parse_year_range};
use crate::markov::{gap, period_means, MarkovTracker, MarkovYear, StationaryResult, Threshold};
use crate::pipeline::{demean_scopes, for_each_year, ChangeAccumulator, CumulativeChangeGrid, YearStep, DEFAULT_CHUNK_ROWS};
use crate::regions::{load_mask, RegionMask, Scope};
use crate::render::{crop_change_grid, downsample, render_change_map, write_image, ImageFormat, Palette, DEFAULT_MAX_WIDTH};
use crate::stats::{pearson, quantiles, read_series_csv, sigma_entry, MomentAccumulator, MomentSummary, SigmaEntry};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Output(String),
    #[error(transparent)]
    Pipeline(#[from] crate::pipeline::PipelineError),
}

fn input_err<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Input(format!("{}: {e}", path.display()))
}

fn output_err<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| CliError::Output(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Units {
    /// DN units.
    #[default]
    Raw,
    /// Percent of the scope's mean DN over the panel.
    Percent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub panel: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub regions: Option<PathBuf>,
    pub series: Option<PathBuf>,
    /// `None` selects every region of the table; an empty list is a vacuous run.
    pub scopes: Option<Vec<String>>,
    pub period_a: (i32, i32),
    pub period_b: (i32, i32),
    pub out: PathBuf,
    pub clamp: f64,
    pub max_width: usize,
    pub image_format: ImageFormat,
    pub threads: Option<usize>,
    pub chunk_rows: usize,
    pub threshold: Threshold,
    pub units: Units,
    pub qq_quantiles: usize,
    pub scatter_max: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            panel: None,
            mask: None,
            regions: None,
            series: None,
            scopes: None,
            period_a: (1993, 2006),
            period_b: (2007, 2013),
            out: PathBuf::from("out"),
            clamp: 3.0,
            max_width: DEFAULT_MAX_WIDTH,
            image_format: ImageFormat::Ppm,
            threads: None,
            chunk_rows: DEFAULT_CHUNK_ROWS,
            threshold: Threshold::Local,
            units: Units::Raw,
            qq_quantiles: 99,
            scatter_max: 100_000,
        }
    }
}

impl RunConfig {
    /// Reads a `key = value` config; relative paths resolve against the
    /// config file's directory.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(input_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text, base)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str, base: &Path) -> Result<(), CliError> {
        let kv = parse_key_values(text).map_err(CliError::Argument)?;
        for (k, v) in kv {
            self.set(&k, &v, base)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), CliError> {
        let arg = |e: String| CliError::Argument(format!("{key}: {e}"));
        let path = |v: &str| {
            let p = PathBuf::from(v);
            if p.is_relative() {
                base.join(p)
            } else {
                p
            }
        };
        let num = |v: &str| v.parse::<f64>().map_err(|_| arg(format!("bad number {v:?}")));
        let int = |v: &str| v.parse::<usize>().map_err(|_| arg(format!("bad integer {v:?}")));
        match key {
            "panel" => self.panel = Some(path(value)),
            "mask" => self.mask = Some(path(value)),
            "regions" => self.regions = Some(path(value)),
            "series" => self.series = Some(path(value)),
            "scopes" => self.scopes = Some(parse_list::<String>(value).map_err(arg)?),
            "period_a" => self.period_a = parse_year_range(value).map_err(arg)?,
            "period_b" => self.period_b = parse_year_range(value).map_err(arg)?,
            "out" => self.out = path(value),
            "clamp" => self.clamp = num(value)?,
            "max_width" => self.max_width = int(value)?,
            "image_format" => {
                self.image_format = match value {
                    "ppm" => ImageFormat::Ppm,
                    "png" => ImageFormat::Png,
                    _ => return Err(arg(format!("expected ppm or png, got {value:?}"))),
                }
            }
            "threads" => self.threads = Some(int(value)?),
            "chunk_rows" => self.chunk_rows = int(value)?,
            "threshold_scope" => {
                self.threshold = match value {
                    "local" => Threshold::Local,
                    "world" => Threshold::World,
                    _ => return Err(arg(format!("expected local or world, got {value:?}"))),
                }
            }
            "units" => {
                self.units = match value {
                    "raw" => Units::Raw,
                    "percent" => Units::Percent,
                    _ => return Err(arg(format!("expected raw or percent, got {value:?}"))),
                }
            }
            "qq_quantiles" => self.qq_quantiles = int(value)?,
            "scatter_max" => self.scatter_max = int(value)?,
            _ => return Err(CliError::Argument(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    fn validate(&self, years: &[i32]) -> Result<(), CliError> {
        let (first, last) = (years[0], *years.last().unwrap());
        for (name, (a, b)) in [("period_a", self.period_a), ("period_b", self.period_b)] {
            if a > b || a - 1 < first || b > last {
                return Err(CliError::Argument(format!(
                    "{name} {a}-{b} outside the diff years {}-{last} of the panel",
                    first + 1
                )));
            }
        }
        let (a, b) = (self.period_a, self.period_b);
        if a.0 <= b.1 && b.0 <= a.1 {
            return Err(CliError::Argument("period_a and period_b overlap".into()));
        }
        if !(self.clamp > 0.0) {
            return Err(CliError::Argument(format!("clamp {} must be positive", self.clamp)));
        }
        if self.chunk_rows == 0 || self.max_width == 0 || self.qq_quantiles < 2 {
            return Err(CliError::Argument("chunk_rows and max_width must be positive, qq_quantiles >= 2".into()));
        }
        Ok(())
    }
}

/// Which artifacts a run writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Outputs {
    pub sigma: bool,
    pub moments: bool,
    pub qq: bool,
    pub scatter: bool,
    pub markov: bool,
    pub growth: bool,
    pub maps: bool,
    pub report: bool,
    pub correlation: bool,
}

impl Outputs {
    pub const ALL: Outputs = Outputs {
        sigma: true,
        moments: true,
        qq: true,
        scatter: true,
        markov: true,
        growth: true,
        maps: true,
        report: true,
        correlation: true,
    };
    pub const NONE: Outputs = Outputs {
        sigma: false,
        moments: false,
        qq: false,
        scatter: false,
        markov: false,
        growth: false,
        maps: false,
        report: false,
        correlation: false,
    };
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub written: Vec<PathBuf>,
    /// Per-scope problems that left `NaN` cells behind.
    pub failures: Vec<String>,
}

/// One line of the cross-region comparison table. Rates in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub y: [f64; 2],
    pub sy: [f64; 2],
    pub app: [f64; 2],
    pub amm: [f64; 2],
    pub a00: [f64; 2],
}

impl ReportRow {
    pub fn empty(name: impl Into<String>) -> Self {
        ReportRow { name: name.into(), y: [f64::NAN; 2], sy: [f64::NAN; 2], app: [f64::NAN; 2], amm: [f64::NAN; 2], a00: [f64::NAN; 2] }
    }
}

/// Fixed-decimal formatting with `NaN` for missing values and no negative zero.
pub fn fmt_fixed(x: f64, decimals: usize) -> String {
    if !x.is_finite() {
        return "NaN".to_string();
    }
    let s = format!("{x:.decimals$}");
    match s.strip_prefix('-') {
        Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
        _ => s,
    }
}

fn period_tag((a, b): (i32, i32)) -> String {
    format!("{:02}{:02}", a.rem_euclid(100), b.rem_euclid(100))
}

pub fn report_header(period_a: (i32, i32), period_b: (i32, i32)) -> String {
    let (a, b) = (period_tag(period_a), period_tag(period_b));
    format!("name,y{a},y{b},sy{a},sy{b},app{a},app{b},amm{a},amm{b},a00{a},a00{b}")
}

pub fn format_report_row(r: &ReportRow) -> String {
    let mut cells = vec![csv_field(&r.name)];
    cells.extend(r.y.iter().map(|&v| fmt_fixed(v, 2)));
    for pair in [r.sy, r.app, r.amm, r.a00] {
        cells.extend(pair.iter().map(|&v| fmt_fixed(v, 1)));
    }
    cells.join(",")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn format_report(rows: &[ReportRow], period_a: (i32, i32), period_b: (i32, i32)) -> String {
    let mut out = report_header(period_a, period_b);
    out.push('\n');
    for r in rows {
        out.push_str(&format_report_row(r));
        out.push('\n');
    }
    out
}

pub fn write_report(rows: &[ReportRow], period_a: (i32, i32), period_b: (i32, i32), path: &Path) -> Result<(), CliError> {
    fs::write(path, format_report(rows, period_a, period_b)).map_err(output_err(path))
}

/// Loads the mask named by the config, or a world-only mask.
pub fn load_run_mask(cfg: &RunConfig, geometry: &GridGeometry) -> Result<RegionMask, CliError> {
    match &cfg.mask {
        Some(m) => {
            let table = cfg.regions.clone().unwrap_or_else(|| m.with_file_name("regions.csv"));
            let mask = load_mask(m, &table).map_err(input_err(m))?;
            mask.check_geometry(geometry).map_err(input_err(m))?;
            Ok(mask)
        }
        None => Ok(RegionMask::world_only(*geometry)),
    }
}

/// Requested scopes in order, World last.
pub fn resolve_scopes(cfg: &RunConfig, mask: &RegionMask) -> Result<Vec<Scope>, CliError> {
    let mut out: Vec<Scope> = match &cfg.scopes {
        None => mask.table().iter().map(|r| Scope::Region(r.id)).collect(),
        Some(names) if names.is_empty() => return Ok(Vec::new()),
        Some(names) => names
            .iter()
            .map(|n| mask.scope_by_name(n).map_err(|e| CliError::Argument(e.to_string())))
            .collect::<Result<_, _>>()?,
    };
    out.retain(|s| *s != Scope::World);
    let mut seen = std::collections::HashSet::new();
    out.retain(|s| seen.insert(*s));
    out.push(Scope::World);
    Ok(out)
}

struct ScopeTrack {
    scope: Scope,
    sigma: Vec<SigmaEntry>,
    tracker: MarkovTracker,
    markov: Vec<MarkovYear>,
    active_years: usize,
}

/// Streams the panel once and writes the selected artifacts into `cfg.out`.
pub fn execute(cfg: &RunConfig, outputs: Outputs) -> Result<RunSummary, CliError> {
    let panel_path = cfg.panel.as_ref().ok_or_else(|| CliError::Argument("no panel directory given".into()))?;
    let source = PanelDir::open(panel_path).map_err(|e| CliError::Input(e.to_string()))?;
    let years = source.years();
    if years.len() < 2 {
        return Err(CliError::Input(format!("{}: panel needs at least two years", panel_path.display())));
    }
    cfg.validate(&years)?;
    let geometry = *source.geometry();
    let mask = load_run_mask(cfg, &geometry)?;
    let scopes = resolve_scopes(cfg, &mask)?;
    fs::create_dir_all(&cfg.out).map_err(output_err(&cfg.out))?;
    let mut summary = RunSummary::default();
    let (pa, pb) = (cfg.period_a, cfg.period_b);

    if scopes.is_empty() {
        if outputs.report {
            let p = cfg.out.join("report.csv");
            write_report(&[], pa, pb, &p)?;
            summary.written.push(p);
        }
        return Ok(summary);
    }

    let mut tracks: Vec<ScopeTrack> = scopes
        .iter()
        .map(|&scope| ScopeTrack { scope, sigma: Vec::new(), tracker: MarkovTracker::new(), markov: Vec::new(), active_years: 0 })
        .collect();
    let world_k = scopes.len() - 1;
    let mut world_acc = [ChangeAccumulator::new(geometry), ChangeAccumulator::new(geometry)];
    let mut local_acc = [ChangeAccumulator::new(geometry), ChangeAccumulator::new(geometry)];
    let mut annual_moments: Vec<(i32, Option<MomentSummary>)> = Vec::new();
    let mut qq: Vec<(i32, Vec<f64>)> = Vec::new();
    let table_ids: Vec<u16> = mask.table().iter().map(|r| r.id).collect();
    let mut totals: Vec<(i32, HashMap<u16, (u64, u64)>, (u64, u64))> = Vec::new();
    let in_period = |p: (i32, i32), y: i32| p.0 <= y && y <= p.1;

    for_each_year(&source, None, cfg.chunk_rows, |step: YearStep<'_>| -> Result<(), CliError> {
        let grid = step.grid;
        let mut by_id = vec![(0u64, 0u64); u16::MAX as usize + 1];
        let nodata = grid.nodata();
        for (&v, &id) in grid.values().iter().zip(mask.ids()) {
            if v != nodata {
                by_id[id as usize].0 += v as u64;
                by_id[id as usize].1 += 1;
            }
        }
        let world = by_id.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        totals.push((grid.year(), table_ids.iter().map(|&id| (id, by_id[id as usize])).collect(), world));

        let Some(diff) = step.diff else { return Ok(()) };
        let year = diff.year();
        let results = demean_scopes(&diff, &mask, &scopes);
        drop(diff);
        let sigmas: Vec<SigmaEntry> = results.par_iter().map(|r| sigma_entry(r.as_ref().ok(), year)).collect();
        let world_sigma = sigmas[world_k].sigma;
        tracks.par_iter_mut().zip(results.par_iter()).zip(sigmas.par_iter()).for_each(|((t, r), s)| {
            let threshold = match cfg.threshold {
                Threshold::Local => s.sigma,
                Threshold::World => world_sigma,
            };
            t.markov.push(t.tracker.step(year, r.as_ref().ok(), threshold));
        });
        for ((t, r), s) in tracks.iter_mut().zip(&results).zip(sigmas) {
            t.sigma.push(s);
            if r.is_ok() {
                t.active_years += 1;
            }
        }
        for (k, p) in [pa, pb].into_iter().enumerate() {
            if in_period(p, year) {
                for (scope, r) in scopes.iter().zip(&results) {
                    if let Ok(d) = r {
                        match scope {
                            Scope::World => world_acc[k].add(d),
                            Scope::Region(_) => local_acc[k].add(d),
                        }
                    }
                }
            }
        }
        match &results[world_k] {
            Ok(d) => {
                let mut acc = MomentAccumulator::default();
                acc.extend(d.values().iter().copied());
                annual_moments.push((year, acc.summary().ok()));
                if outputs.qq {
                    let mut v = d.values().to_vec();
                    v.sort_by(f64::total_cmp);
                    qq.push((year, quantiles(&v, cfg.qq_quantiles)));
                }
            }
            Err(_) => annual_moments.push((year, None)),
        }
        Ok(())
    })?;

    let names: Vec<String> = scopes.iter().map(|&s| mask.scope_name(s)).collect();
    for t in &tracks {
        if t.active_years == 0 {
            summary.failures.push(format!("{}: no active pixels in any year", mask.scope_name(t.scope)));
        }
    }

    // Units: percent scales every demeaned quantity by 100 / mean in-scope DN.
    let scale: Vec<f64> = scopes
        .iter()
        .map(|&s| match cfg.units {
            Units::Raw => 1.0,
            Units::Percent => {
                let (sum, n) = totals.iter().fold((0u64, 0u64), |acc, (_, by_id, world)| {
                    let (t, c) = match s {
                        Scope::World => *world,
                        Scope::Region(id) => by_id[&id],
                    };
                    (acc.0 + t, acc.1 + c)
                });
                if sum == 0 {
                    f64::NAN
                } else {
                    100.0 * n as f64 / sum as f64
                }
            }
        })
        .collect();

    let out = &cfg.out;
    if outputs.sigma {
        let p = out.join("sigma_series.csv");
        write_csv(&p, &["scope", "year", "sigma", "n"], |w| {
            for ((t, name), f) in tracks.iter().zip(&names).zip(&scale) {
                for e in &t.sigma {
                    w.write_record([name.clone(), e.year.to_string(), (e.sigma * f).to_string(), e.active_count.to_string()])?;
                }
            }
            Ok(())
        })?;
        summary.written.push(p);
    }

    let stationaries: Vec<Vec<StationaryResult>> =
        tracks.iter().map(|t| t.markov.iter().filter_map(|m| m.stationary).collect()).collect();
    if outputs.markov {
        let p = out.join("markov.csv");
        write_csv(&p, &["scope", "year", "a_pp", "a_00", "a_mm", "gap", "converged", "n_transitions"], |w| {
            for (t, name) in tracks.iter().zip(&names) {
                for m in &t.markov {
                    let (pp, oo, mm, g, conv) = match &m.stationary {
                        Some(s) => (s.a_pp, s.a_00, s.a_mm, gap(s), s.converged.to_string()),
                        None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN, "NaN".to_string()),
                    };
                    let n = m.matrix.as_ref().map_or(0, |x| x.n_transitions());
                    w.write_record([
                        name.clone(),
                        m.year.to_string(),
                        fmt_fixed(100.0 * pp, 1),
                        fmt_fixed(100.0 * oo, 1),
                        fmt_fixed(100.0 * mm, 1),
                        fmt_fixed(100.0 * g, 1),
                        conv,
                        n.to_string(),
                    ])?;
                }
            }
            Ok(())
        })?;
        summary.written.push(p);
    }

    // Aggregate growth: year effects from every table region, applied to each scope.
    let series_of = |s: Scope| AggregateSeries {
        scope: s,
        entries: totals
            .iter()
            .map(|(year, by_id, world)| {
                let (t, n) = match s {
                    Scope::World => *world,
                    Scope::Region(id) => by_id[&id],
                };
                AggregateEntry { year: *year, total_light: t, log_light: (t > 0).then(|| (t as f64).ln()), valid_pixels: n }
            })
            .collect(),
    };
    let fit_input: Vec<AggregateSeries> = table_ids
        .iter()
        .map(|&id| series_of(Scope::Region(id)))
        .filter(|s| s.entries.iter().filter(|e| e.log_light.is_some()).count() >= 3)
        .collect();
    let effects: Result<YearEffects, String> = fit_year_effects(&fit_input).map_err(|e| e.to_string());
    let mut growth: Vec<[Option<GrowthEstimate>; 2]> = Vec::with_capacity(scopes.len());
    for (&s, name) in scopes.iter().zip(&names) {
        let series = series_of(s);
        let mut pair = [None, None];
        match &effects {
            Ok(fx) => {
                for (k, p) in [pa, pb].into_iter().enumerate() {
                    match estimate_growth(&series, fx, p) {
                        Ok(e) => pair[k] = Some(e),
                        Err(e) => summary.failures.push(format!("{name}: growth {}-{}: {e}", p.0, p.1)),
                    }
                }
            }
            Err(e) => summary.failures.push(format!("{name}: growth: {e}")),
        }
        growth.push(pair);
    }
    if outputs.growth {
        let p = out.join("growth.csv");
        write_csv(&p, &["scope", "period", "y_hat", "sigma_y", "n_years"], |w| {
            for (pair, name) in growth.iter().zip(&names) {
                for (e, per) in pair.iter().zip([pa, pb]) {
                    let (y, sy, n) = e.map_or((f64::NAN, f64::NAN, 0), |e| (e.y_hat, e.sigma_y, e.n_years));
                    w.write_record([name.clone(), format!("{}-{}", per.0, per.1), fmt_fixed(y, 2), fmt_fixed(sy, 2), n.to_string()])?;
                }
            }
            Ok(())
        })?;
        summary.written.push(p);
    }

    if outputs.moments {
        let mut cumulative = vec![MomentAccumulator::default(); scopes.len()];
        let slot: HashMap<u16, usize> =
            scopes.iter().enumerate().filter_map(|(k, s)| if let Scope::Region(id) = s { Some((*id, k)) } else { None }).collect();
        for px in 0..geometry.pixel_count() {
            if world_acc[0].count()[px] > 0 || world_acc[1].count()[px] > 0 {
                cumulative[world_k].push(world_acc[0].sum()[px] + world_acc[1].sum()[px]);
            }
            if local_acc[0].count()[px] > 0 || local_acc[1].count()[px] > 0 {
                if let Some(&k) = slot.get(&mask.ids()[px]) {
                    cumulative[k].push(local_acc[0].sum()[px] + local_acc[1].sum()[px]);
                }
            }
        }
        let scaled = |m: MomentSummary, f: f64| MomentSummary { mean: m.mean * f, std: m.std * f, ..m };
        let cum: BTreeMap<&str, serde_json::Value> = names
            .iter()
            .zip(&cumulative)
            .zip(&scale)
            .map(|((n, acc), &f)| (n.as_str(), acc.summary().ok().map(|m| json_moments(&scaled(m, f))).unwrap_or(serde_json::Value::Null)))
            .collect();
        let annual: Vec<serde_json::Value> = annual_moments
            .iter()
            .map(|(y, m)| json!({"year": y, "moments": m.map(|m| json_moments(&scaled(m, scale[world_k])))}))
            .collect();
        let doc = json!({
            "units": match cfg.units { Units::Raw => "dn", Units::Percent => "percent" },
            "cumulative_years": [pa.0.min(pb.0), pa.1.max(pb.1)],
            "cumulative": cum,
            "annual_world": annual,
        });
        let p = out.join("moments.json");
        fs::write(&p, serde_json::to_string_pretty(&doc).unwrap() + "\n").map_err(output_err(&p))?;
        summary.written.push(p);
    }

    if outputs.qq {
        let p = out.join("qq.csv");
        let f = scale[world_k];
        write_csv(&p, &["year", "k", "q_ref", "q"], |w| {
            if let Some((_, reference)) = qq.first() {
                for (year, q) in &qq {
                    for (k, (a, b)) in reference.iter().zip(q).enumerate() {
                        w.write_record([year.to_string(), (k + 1).to_string(), (a * f).to_string(), (b * f).to_string()])?;
                    }
                }
            }
            Ok(())
        })?;
        summary.written.push(p);
    }

    if outputs.scatter {
        let p = out.join("scatter.csv");
        let f = scale[world_k];
        let idx: Vec<usize> = (0..geometry.pixel_count())
            .filter(|&k| world_acc[0].count()[k] > 0 || world_acc[1].count()[k] > 0)
            .collect();
        let stride = idx.len().div_ceil(cfg.scatter_max.max(1)).max(1);
        write_csv(&p, &["index", "x", "y", "total"], |w| {
            for &k in idx.iter().step_by(stride) {
                let (x, y) = (world_acc[0].sum()[k] * f, world_acc[1].sum()[k] * f);
                w.write_record([k.to_string(), x.to_string(), y.to_string(), (x + y).to_string()])?;
            }
            Ok(())
        })?;
        summary.written.push(p);
    }

    if outputs.maps {
        let dir = out.join("maps");
        fs::create_dir_all(&dir).map_err(output_err(&dir))?;
        let palette = Palette::with_clamp(cfg.clamp).map_err(|e| CliError::Argument(e.to_string()))?;
        let ext = match cfg.image_format {
            ImageFormat::Ppm => "ppm",
            ImageFormat::Png => "png",
        };
        let full = (pa.0.min(pb.0), pa.1.max(pb.1));
        for (&scope, name) in scopes.iter().zip(&names) {
            let accs = match scope {
                Scope::World => &world_acc,
                Scope::Region(_) => &local_acc,
            };
            let grids = [
                (pa, average(&[&accs[0]], pa, scope)),
                (pb, average(&[&accs[1]], pb, scope)),
                (full, average(&[&accs[0], &accs[1]], full, scope)),
            ];
            let bbox = match scope {
                Scope::World => None,
                Scope::Region(_) => mask.bounding_box(scope).map_err(|e| CliError::Argument(e.to_string()))?,
            };
            for (period, mut g) in grids {
                if let Scope::Region(id) = scope {
                    for (v, &m) in g.values.iter_mut().zip(mask.ids()) {
                        if m != id {
                            *v = f64::NAN;
                        }
                    }
                    match bbox {
                        Some(b) => g = crop_change_grid(&g, b).map_err(|e| CliError::Argument(e.to_string()))?,
                        None => continue,
                    }
                }
                let g = downsample(&g, cfg.max_width).map_err(|e| CliError::Argument(e.to_string()))?;
                match render_change_map(&g, &palette) {
                    Ok(img) => {
                        let p = dir.join(format!("{}_{}_{}.{ext}", file_stem(name), period.0, period.1));
                        write_image(&img, &p, cfg.image_format).map_err(|e| CliError::Output(e.to_string()))?;
                        summary.written.push(p);
                    }
                    Err(e) => summary.failures.push(format!("{name}: map {}-{}: {e}", period.0, period.1)),
                }
            }
        }
    }

    if outputs.correlation {
        if let Some(series_path) = &cfg.series {
            let ext = read_series_csv(series_path).map_err(input_err(series_path))?;
            let world: BTreeMap<i32, f64> = totals
                .iter()
                .filter(|(_, _, w)| w.0 > 0)
                .map(|(y, _, w)| (*y, (w.0 as f64).ln()))
                .collect();
            let (mut xs, mut ys, mut used) = (Vec::new(), Vec::new(), Vec::new());
            for (year, v) in ext {
                if let (Some(a), Some(b)) = (world.get(&(year - 1)), world.get(&year)) {
                    xs.push(100.0 * (b - a));
                    ys.push(v);
                    used.push(year);
                }
            }
            let r = pearson(&xs, &ys);
            let doc = json!({
                "x": "world aggregate light growth, percent",
                "y": series_path.file_name().map(|s| s.to_string_lossy().into_owned()),
                "years": used,
                "n": xs.len(),
                "r": r.as_ref().ok(),
                "error": r.as_ref().err().map(|e| e.to_string()),
            });
            let p = out.join("correlation.json");
            fs::write(&p, serde_json::to_string_pretty(&doc).unwrap() + "\n").map_err(output_err(&p))?;
            summary.written.push(p);
        }
    }

    if outputs.report {
        let rows: Vec<ReportRow> = names
            .iter()
            .zip(&growth)
            .zip(&stationaries)
            .map(|((name, g), st)| {
                let mut row = ReportRow::empty(name.clone());
                for (k, p) in [pa, pb].into_iter().enumerate() {
                    if let Some(e) = g[k] {
                        row.y[k] = e.y_hat;
                        row.sy[k] = e.sigma_y;
                    }
                    let m = period_means(st, p);
                    row.app[k] = 100.0 * m.a_pp;
                    row.amm[k] = 100.0 * m.a_mm;
                    row.a00[k] = 100.0 * m.a_00;
                }
                row
            })
            .collect();
        let p = out.join("report.csv");
        write_report(&rows, pa, pb, &p)?;
        summary.written.push(p);
    }
    Ok(summary)
}

fn json_moments(m: &MomentSummary) -> serde_json::Value {
    let f = |x: f64| if x.is_finite() { json!(x) } else { serde_json::Value::Null };
    json!({"n": m.n, "mean": f(m.mean), "std": f(m.std), "skewness": f(m.skewness), "excess_kurtosis": f(m.excess_kurtosis)})
}

fn average(accs: &[&ChangeAccumulator], years: (i32, i32), scope: Scope) -> CumulativeChangeGrid {
    let mut values = vec![f64::NAN; accs[0].sum().len()];
    for (k, v) in values.iter_mut().enumerate() {
        let (s, c) = accs.iter().fold((0.0, 0u32), |(s, c), a| (s + a.sum()[k], c + a.count()[k] as u32));
        if c > 0 {
            *v = s / c as f64;
        }
    }
    CumulativeChangeGrid { geometry: *accs[0].geometry(), years, scope, values }
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

fn write_csv<F>(path: &Path, header: &[&str], body: F) -> Result<(), CliError>
where
    F: FnOnce(&mut csv::Writer<fs::File>) -> Result<(), csv::Error>,
{
    let mut w = csv::Writer::from_path(path).map_err(output_err(path))?;
    w.write_record(header).map_err(output_err(path))?;
    body(&mut w).map_err(output_err(path))?;
    w.flush().map_err(output_err(path))
}

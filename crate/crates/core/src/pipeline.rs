//! Annual differencing, active-pixel demeaning and change accumulation.
//!
//! A pixel is *defined* in a year pair when both years carry data, and
//! *active* when it is defined and its intensity changed. Demeaning subtracts
//! the scope-wide mean change over active pixels only, so a calibration
//! offset that moves every changing pixel by the same amount cancels.
//!
//! Sums over deltas are kept as exact integers. Demeaned values are computed
//! as `(n * delta - sum) / n` with a single rounding, which makes them
//! independent of thread count and bit-identical under a constant offset of
//! the active deltas.

use std::borrow::Cow;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::{GridError, GridGeometry, GridSource, RasterGrid};
use crate::regions::{RegionError, RegionMask, Scope};

/// Default band height used to split work across threads.
pub const DEFAULT_CHUNK_ROWS: usize = 64;

pub const NLD1_MAGIC: &[u8; 4] = b"NLD1";
const DTYPE_F32: u8 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("years {prev} and {curr} are not consecutive")]
    Sequencing { prev: i32, curr: i32 },
    #[error("no active pixels in {scope} for year {year}")]
    EmptyScope { scope: Scope, year: i32 },
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Fixed-size bitset over pixel indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitset {
    words: Vec<u64>,
    len: usize,
}

impl Bitset {
    pub fn new(len: usize) -> Self {
        Bitset { words: vec![0; len.div_ceil(64)], len }
    }

    #[inline]
    pub fn get(&self, k: usize) -> bool {
        self.words[k / 64] >> (k % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, k: usize) {
        self.words[k / 64] |= 1 << (k % 64);
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }
}

/// Sorted indices of the pixels whose intensity changed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveMask {
    indices: Vec<u32>,
}

impl ActiveMask {
    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.position(index).is_some()
    }

    fn position(&self, index: usize) -> Option<usize> {
        u32::try_from(index).ok().and_then(|k| self.indices.binary_search(&k).ok())
    }
}

/// Year-over-year change for one pair of consecutive years.
///
/// Stored compactly: a defined-bitset over all pixels plus the nonzero
/// deltas of active pixels. A defined pixel that is not active has delta 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffGrid {
    geometry: GridGeometry,
    year_pair: (i32, i32),
    defined: Bitset,
    active: ActiveMask,
    deltas: Vec<i16>,
}

impl DiffGrid {
    /// Assemble from parts; `active` must be sorted, unique and defined.
    pub fn from_parts(
        geometry: GridGeometry,
        year_pair: (i32, i32),
        defined: Bitset,
        active: Vec<u32>,
        deltas: Vec<i16>,
    ) -> Result<Self, PipelineError> {
        if defined.len() != geometry.pixel_count() || active.len() != deltas.len() {
            return Err(PipelineError::Shape("diff parts have inconsistent lengths".into()));
        }
        if active.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PipelineError::Argument("active indices must be strictly increasing".into()));
        }
        if active.iter().any(|&k| k as usize >= defined.len() || !defined.get(k as usize)) {
            return Err(PipelineError::Argument("active pixel outside the defined mask".into()));
        }
        Ok(DiffGrid { geometry, year_pair, defined, active: ActiveMask { indices: active }, deltas })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn year_pair(&self) -> (i32, i32) {
        self.year_pair
    }

    /// The later year of the pair; demeaned grids are labelled with it.
    pub fn year(&self) -> i32 {
        self.year_pair.1
    }

    pub fn defined(&self) -> &Bitset {
        &self.defined
    }

    pub fn active(&self) -> &ActiveMask {
        &self.active
    }

    /// Deltas aligned with `active().indices()`.
    pub fn active_deltas(&self) -> &[i16] {
        &self.deltas
    }

    /// Delta at a pixel, `None` where undefined.
    pub fn delta(&self, index: usize) -> Option<i16> {
        if !self.defined.get(index) {
            return None;
        }
        Some(self.active.position(index).map_or(0, |p| self.deltas[p]))
    }

    /// The same grid with `offset` added to every active delta while the
    /// active mask stays fixed. Models a uniform calibration shift.
    pub fn with_offset(&self, offset: i16) -> DiffGrid {
        let mut out = self.clone();
        out.deltas.iter_mut().for_each(|d| *d += offset);
        out
    }
}

/// Differences two consecutive annual grids.
pub fn diff_year(prev: &RasterGrid, curr: &RasterGrid) -> Result<DiffGrid, PipelineError> {
    diff_year_banded(prev, curr, DEFAULT_CHUNK_ROWS)
}

/// [`diff_year`] with an explicit band height for the parallel split. The
/// result does not depend on the band height.
pub fn diff_year_banded(prev: &RasterGrid, curr: &RasterGrid, chunk_rows: usize) -> Result<DiffGrid, PipelineError> {
    let geometry = *prev.geometry();
    if curr.geometry() != &geometry {
        return Err(PipelineError::Shape(format!(
            "years {} and {} have different geometries",
            prev.year(),
            curr.year()
        )));
    }
    if curr.year() != prev.year() + 1 {
        return Err(PipelineError::Sequencing { prev: prev.year(), curr: curr.year() });
    }
    let n = geometry.pixel_count();
    let chunk = (chunk_rows.max(1) * geometry.width).div_ceil(64) * 64;
    let (a, b) = (prev.values(), curr.values());
    let (na, nb) = (prev.nodata(), curr.nodata());

    // Pass 1: defined bits and per-band active counts.
    let mut defined = Bitset::new(n);
    let counts: Vec<usize> = defined
        .words
        .par_chunks_mut(chunk / 64)
        .enumerate()
        .map(|(c, words)| {
            let start = c * chunk;
            let end = (start + chunk).min(n);
            let mut active = 0;
            for k in start..end {
                let (x, y) = (a[k], b[k]);
                if x != na && y != nb {
                    words[(k - start) / 64] |= 1 << (k % 64);
                    active += (x != y) as usize;
                }
            }
            active
        })
        .collect();

    // Pass 2: fill preallocated active lists band by band.
    let total: usize = counts.iter().sum();
    let mut indices = vec![0u32; total];
    let mut deltas = vec![0i16; total];
    let mut slices = Vec::with_capacity(counts.len());
    let (mut irest, mut drest) = (indices.as_mut_slice(), deltas.as_mut_slice());
    for (c, &cnt) in counts.iter().enumerate() {
        let (ih, it) = irest.split_at_mut(cnt);
        let (dh, dt) = drest.split_at_mut(cnt);
        slices.push((c, ih, dh));
        irest = it;
        drest = dt;
    }
    slices.into_par_iter().for_each(|(c, is, ds)| {
        let start = c * chunk;
        let end = (start + chunk).min(n);
        let mut p = 0;
        for k in start..end {
            let (x, y) = (a[k], b[k]);
            if x != na && y != nb && x != y {
                is[p] = k as u32;
                ds[p] = y as i16 - x as i16;
                p += 1;
            }
        }
    });

    Ok(DiffGrid {
        geometry,
        year_pair: (prev.year(), curr.year()),
        defined,
        active: ActiveMask { indices },
        deltas,
    })
}

/// Scope-demeaned change for one year, valued on active in-scope pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DemeanedDiffGrid {
    geometry: GridGeometry,
    year: i32,
    scope: Scope,
    scope_mean: f64,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl DemeanedDiffGrid {
    /// Assemble from explicit sparse values (sorted, unique indices).
    pub fn from_parts(
        geometry: GridGeometry,
        year: i32,
        scope: Scope,
        scope_mean: f64,
        indices: Vec<u32>,
        values: Vec<f64>,
    ) -> Result<Self, PipelineError> {
        if indices.len() != values.len() {
            return Err(PipelineError::Shape("indices and values differ in length".into()));
        }
        if indices.windows(2).any(|w| w[0] >= w[1])
            || indices.last().is_some_and(|&k| k as usize >= geometry.pixel_count())
        {
            return Err(PipelineError::Argument("indices must be strictly increasing and in bounds".into()));
        }
        Ok(DemeanedDiffGrid { geometry, year, scope, scope_mean, indices, values })
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

    pub fn scope_mean(&self) -> f64 {
        self.scope_mean
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value_at(&self, index: usize) -> Option<f64> {
        let k = u32::try_from(index).ok()?;
        self.indices.binary_search(&k).ok().map(|p| self.values[p])
    }

    /// Same pixels with every value multiplied by `k`.
    pub fn scaled(&self, k: f64) -> DemeanedDiffGrid {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= k);
        out.scope_mean *= k;
        out
    }
}

#[inline]
fn demeaned_value(n: i64, sum: i64, delta: i16) -> f64 {
    (n * delta as i64 - sum) as f64 / n as f64
}

/// Subtracts the mean change over active in-scope pixels.
pub fn demean(diff: &DiffGrid, mask: &RegionMask, scope: Scope) -> Result<DemeanedDiffGrid, PipelineError> {
    demean_scopes(diff, mask, &[scope]).pop().expect("one scope in, one result out")
}

/// Demeans one diff grid for several scopes in a single pass over the
/// active pixels. Results come back in the order of `scopes`.
pub fn demean_scopes(
    diff: &DiffGrid,
    mask: &RegionMask,
    scopes: &[Scope],
) -> Vec<Result<DemeanedDiffGrid, PipelineError>> {
    if mask.check_geometry(&diff.geometry).is_err() {
        return scopes.iter().map(|_| Err(RegionError::GeometryMismatch.into())).collect();
    }
    let ids = mask.ids();
    let idx = diff.active.indices();
    let deltas = &diff.deltas;

    // Exact integer (sum, count) for the world and per region id.
    let world: (i64, i64) = (deltas.iter().map(|&d| d as i64).sum(), deltas.len() as i64);
    let want_regions = scopes.iter().any(|s| matches!(s, Scope::Region(_)));
    let mut per_id = Vec::new();
    if want_regions {
        per_id = vec![(0i64, 0i64); u16::MAX as usize + 1];
        for (&k, &d) in idx.iter().zip(deltas) {
            let e = &mut per_id[ids[k as usize] as usize];
            e.0 += d as i64;
            e.1 += 1;
        }
    }

    // One buffer per distinct, valid, nonempty region.
    let mut slot_of_id: Vec<Option<usize>> = Vec::new();
    let mut bufs: Vec<Option<(Vec<u32>, Vec<f64>)>> = Vec::new();
    let mut moments: Vec<(i64, i64)> = Vec::new();
    if want_regions {
        slot_of_id = vec![None; u16::MAX as usize + 1];
        for &scope in scopes {
            if let Scope::Region(id) = scope {
                let (sum, n) = per_id[id as usize];
                if n > 0 && mask.region(id).is_some() && slot_of_id[id as usize].is_none() {
                    slot_of_id[id as usize] = Some(bufs.len());
                    bufs.push(Some((Vec::with_capacity(n as usize), Vec::with_capacity(n as usize))));
                    moments.push((sum, n));
                }
            }
        }
        for (&k, &d) in idx.iter().zip(deltas) {
            if let Some(b) = slot_of_id[ids[k as usize] as usize] {
                let (sum, n) = moments[b];
                let (is, vs) = bufs[b].as_mut().unwrap();
                is.push(k);
                vs.push(demeaned_value(n, sum, d));
            }
        }
    }

    let mut out: Vec<Result<DemeanedDiffGrid, PipelineError>> = Vec::with_capacity(scopes.len());
    for (s, &scope) in scopes.iter().enumerate() {
        if let Err(e) = mask.validate_scope(scope) {
            out.push(Err(e.into()));
            continue;
        }
        let (sum, n) = match scope {
            Scope::World => world,
            Scope::Region(id) => per_id[id as usize],
        };
        if n == 0 {
            out.push(Err(PipelineError::EmptyScope { scope, year: diff.year() }));
            continue;
        }
        let (indices, values) = match scope {
            Scope::World => (idx.to_vec(), deltas.par_iter().map(|&d| demeaned_value(n, sum, d)).collect()),
            Scope::Region(id) => match bufs[slot_of_id[id as usize].unwrap()].take() {
                Some(b) => b,
                None => {
                    let first = scopes[..s].iter().position(|&x| x == scope).unwrap();
                    let d = out[first].as_ref().unwrap();
                    (d.indices.clone(), d.values.clone())
                }
            },
        };
        out.push(Ok(DemeanedDiffGrid {
            geometry: diff.geometry,
            year: diff.year(),
            scope,
            scope_mean: sum as f64 / n as f64,
            indices,
            values,
        }));
    }
    out
}

/// One step of a streaming pass over a panel.
pub struct YearStep<'a> {
    /// The grid of the current year.
    pub grid: &'a RasterGrid,
    /// Change from the previous year, absent for the first loaded year.
    pub diff: Option<DiffGrid>,
}

/// Streams a panel year by year, keeping at most two grids resident.
///
/// `diff_years` restricts the pass to diff years `a..=b` (the grid of year
/// `a - 1` is loaded as the first step). The previous grid is released before
/// the callback runs.
pub fn for_each_year<S, E, F>(
    source: &S,
    diff_years: Option<(i32, i32)>,
    chunk_rows: usize,
    mut f: F,
) -> Result<(), E>
where
    S: GridSource + ?Sized,
    E: From<PipelineError>,
    F: FnMut(YearStep<'_>) -> Result<(), E>,
{
    let years = source.years();
    let (first, last) = match diff_years {
        None => (years[0], *years.last().unwrap()),
        Some((a, b)) => {
            if a > b || a - 1 < years[0] || b > *years.last().unwrap() {
                return Err(PipelineError::Argument(format!(
                    "diff years {a}..={b} outside panel {}..={}",
                    years[0],
                    years.last().unwrap()
                ))
                .into());
            }
            (a - 1, b)
        }
    };
    let mut prev: Option<Cow<'_, RasterGrid>> = None;
    for year in first..=last {
        let curr = source.load(year).map_err(PipelineError::from)?;
        let diff = match prev.take() {
            Some(p) => Some(diff_year_banded(&p, &curr, chunk_rows)?),
            None => None,
        };
        f(YearStep { grid: &curr, diff })?;
        prev = Some(curr);
    }
    Ok(())
}

/// Accumulated demeaned change per pixel, `NaN` where never active.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeChangeGrid {
    pub geometry: GridGeometry,
    pub years: (i32, i32),
    pub scope: Scope,
    pub values: Vec<f64>,
}

impl CumulativeChangeGrid {
    pub fn get(&self, index: usize) -> Option<f64> {
        let v = self.values[index];
        (!v.is_nan()).then_some(v)
    }

    pub fn valued(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values.iter().enumerate().filter(|(_, v)| !v.is_nan()).map(|(k, &v)| (k, v))
    }

    pub fn valued_count(&self) -> usize {
        self.values.iter().filter(|v| !v.is_nan()).count()
    }
}

/// Per-pixel running sum and active-year count of demeaned values.
#[derive(Debug, Clone)]
pub struct ChangeAccumulator {
    geometry: GridGeometry,
    sum: Vec<f64>,
    count: Vec<u16>,
}

impl ChangeAccumulator {
    pub fn new(geometry: GridGeometry) -> Self {
        let n = geometry.pixel_count();
        ChangeAccumulator { geometry, sum: vec![0.0; n], count: vec![0; n] }
    }

    pub fn add(&mut self, d: &DemeanedDiffGrid) {
        for (&k, &v) in d.indices.iter().zip(&d.values) {
            self.sum[k as usize] += v;
            self.count[k as usize] += 1;
        }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn sum(&self) -> &[f64] {
        &self.sum
    }

    pub fn count(&self) -> &[u16] {
        &self.count
    }

    pub fn sum_grid(&self, years: (i32, i32), scope: Scope) -> CumulativeChangeGrid {
        let values = self.sum.iter().zip(&self.count).map(|(&s, &c)| if c == 0 { f64::NAN } else { s }).collect();
        CumulativeChangeGrid { geometry: self.geometry, years, scope, values }
    }

    pub fn average_grid(&self, years: (i32, i32), scope: Scope) -> CumulativeChangeGrid {
        let values =
            self.sum.iter().zip(&self.count).map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 }).collect();
        CumulativeChangeGrid { geometry: self.geometry, years, scope, values }
    }
}

fn accumulate<S: GridSource + ?Sized>(
    source: &S,
    mask: &RegionMask,
    scope: Scope,
    years: Option<(i32, i32)>,
) -> Result<(ChangeAccumulator, (i32, i32)), PipelineError> {
    mask.check_geometry(source.geometry())?;
    mask.validate_scope(scope)?;
    let all = source.years();
    if all.len() < 2 {
        return Err(PipelineError::Argument("panel needs at least two years".into()));
    }
    let range = years.unwrap_or((all[1], *all.last().unwrap()));
    let mut acc = ChangeAccumulator::new(*source.geometry());
    for_each_year(source, Some(range), DEFAULT_CHUNK_ROWS, |step: YearStep<'_>| -> Result<(), PipelineError> {
        if let Some(diff) = step.diff {
            acc.add(&demean(&diff, mask, scope)?);
        }
        Ok(())
    })?;
    Ok((acc, range))
}

/// Sum of demeaned annual change over every diff year of the panel.
pub fn cumulative_change<S: GridSource + ?Sized>(
    source: &S,
    mask: &RegionMask,
    scope: Scope,
) -> Result<CumulativeChangeGrid, PipelineError> {
    let (acc, range) = accumulate(source, mask, scope, None)?;
    Ok(acc.sum_grid(range, scope))
}

/// Sum of demeaned annual change over diff years `a..=b`.
pub fn cumulative_change_over<S: GridSource + ?Sized>(
    source: &S,
    mask: &RegionMask,
    scope: Scope,
    years: (i32, i32),
) -> Result<CumulativeChangeGrid, PipelineError> {
    let (acc, range) = accumulate(source, mask, scope, Some(years))?;
    Ok(acc.sum_grid(range, scope))
}

/// Mean demeaned change per pixel over the active years within `a..=b`.
pub fn period_average<S: GridSource + ?Sized>(
    source: &S,
    mask: &RegionMask,
    scope: Scope,
    years: (i32, i32),
) -> Result<CumulativeChangeGrid, PipelineError> {
    if years.0 > years.1 {
        return Err(PipelineError::Argument(format!("empty year range {}..={}", years.0, years.1)));
    }
    let (acc, range) = accumulate(source, mask, scope, Some(years))?;
    Ok(acc.average_grid(range, scope))
}

/// Dumps a demeaned grid as NLD1: the NLG1 header layout with an f32
/// payload, `NaN` where no value.
pub fn write_demeaned_nld1(d: &DemeanedDiffGrid, path: impl AsRef<Path>) -> Result<(), PipelineError> {
    let path = path.as_ref();
    let year = u16::try_from(d.year).map_err(|_| PipelineError::Argument(format!("year {}", d.year)))?;
    let mut payload = vec![f32::NAN; d.geometry.pixel_count()];
    for (&k, &v) in d.indices.iter().zip(&d.values) {
        payload[k as usize] = v as f32;
    }
    let file = File::create(path).map_err(|e| GridError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        w.write_all(NLD1_MAGIC)?;
        w.write_all(&1u16.to_le_bytes())?;
        d.geometry.write_le(&mut w)?;
        w.write_all(&year.to_le_bytes())?;
        w.write_all(&[DTYPE_F32, 0])?;
        w.write_all(&[0u8; 6])?;
        for v in payload {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    })();
    res.map_err(|e| GridError::io(path, e).into())
}

/// Reads an NLD1 dump back as `(geometry, year, values)`.
pub fn read_nld1(path: impl AsRef<Path>) -> Result<(GridGeometry, i32, Vec<f32>), PipelineError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| GridError::io(path, e))?;
    if bytes.len() < 56 || &bytes[0..4] != NLD1_MAGIC {
        return Err(GridError::Format(format!("{}: not an NLD1 file", path.display())).into());
    }
    let g = GridGeometry::read_le(&bytes[6..46])?;
    let year = u16::from_le_bytes([bytes[46], bytes[47]]) as i32;
    let payload = &bytes[56..];
    if payload.len() != 4 * g.pixel_count() {
        return Err(GridError::Truncated { expected: 4 * g.pixel_count(), found: payload.len() }.into());
    }
    let values = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((g, year, values))
}

/// Sparse `i,j,value` export of the valued pixels.
pub fn write_demeaned_csv(d: &DemeanedDiffGrid, path: impl AsRef<Path>) -> Result<(), PipelineError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| GridError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "i,j,value")?;
        for (&k, &v) in d.indices.iter().zip(&d.values) {
            let (i, j) = d.geometry.coords(k as usize);
            writeln!(w, "{i},{j},{v}")?;
        }
        w.flush()
    })();
    res.map_err(|e| GridError::io(path, e).into())
}

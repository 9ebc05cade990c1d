//! Raster data model and file I/O for annual luminosity composites.
//!
//! Grids are stored row-major with row 0 as the northernmost row. The native
//! container is NLG1, a small little-endian header followed by one byte per
//! pixel. ESRI ASCII grids can be imported and exported for exchange.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Highest valid digital number of a stable-lights composite.
pub const MAX_DN: u8 = 63;
/// Default nodata sentinel, outside the valid DN range.
pub const NODATA: u8 = 255;

pub const NLG1_MAGIC: &[u8; 4] = b"NLG1";
pub const NLG1_VERSION: u16 = 1;
/// Size in bytes of the NLG1 header preceding the pixel payload.
pub const NLG1_HEADER_LEN: usize = 56;
const DTYPE_U8: u8 = 0;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("value {value} at pixel {index} is outside 0..={max} and is not nodata")]
    Range { index: usize, value: i64, max: u8 },
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("grid shape mismatch: {0}")]
    Shape(String),
    #[error("panel years must be strictly increasing and consecutive, got {0:?}")]
    Sequence(Vec<i32>),
}

impl GridError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        GridError::Io { path: path.to_path_buf(), source }
    }
}

/// A plate carrée lattice of square cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub width: usize,
    pub height: usize,
    pub lon_min: f64,
    pub lon_max: f64,
    pub lat_min: f64,
    pub lat_max: f64,
}

impl GridGeometry {
    /// Build a geometry from an extent and a cell size; dimensions are the
    /// rounded number of cells spanning each axis.
    pub fn from_extent(
        lon_min: f64,
        lon_max: f64,
        lat_min: f64,
        lat_max: f64,
        cell_size: f64,
    ) -> Result<Self, GridError> {
        if !(cell_size > 0.0) || !cell_size.is_finite() {
            return Err(GridError::Geometry(format!("cell size {cell_size} must be positive")));
        }
        let width = ((lon_max - lon_min) / cell_size).round();
        let height = ((lat_max - lat_min) / cell_size).round();
        if !(width >= 1.0 && height >= 1.0) {
            return Err(GridError::Geometry(format!(
                "extent [{lon_min},{lon_max}]x[{lat_min},{lat_max}] holds no cells of size {cell_size}"
            )));
        }
        Self::new(width as usize, height as usize, lon_min, lon_max, lat_min, lat_max)
    }

    /// Build a geometry from explicit dimensions. The implied cell must be
    /// square (equal longitude and latitude spacing).
    pub fn new(
        width: usize,
        height: usize,
        lon_min: f64,
        lon_max: f64,
        lat_min: f64,
        lat_max: f64,
    ) -> Result<Self, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::Geometry(format!("dimensions {width}x{height} must be nonzero")));
        }
        let pixels = width.checked_mul(height);
        if pixels.map_or(true, |n| n > u32::MAX as usize) {
            return Err(GridError::Geometry(format!("{width}x{height} exceeds the u32 pixel index space")));
        }
        for v in [lon_min, lon_max, lat_min, lat_max] {
            if !v.is_finite() {
                return Err(GridError::Geometry("non-finite extent".into()));
            }
        }
        if !(lon_max > lon_min && lat_max > lat_min) {
            return Err(GridError::Geometry(format!(
                "empty extent [{lon_min},{lon_max}]x[{lat_min},{lat_max}]"
            )));
        }
        let dx = (lon_max - lon_min) / width as f64;
        let dy = (lat_max - lat_min) / height as f64;
        if (dx - dy).abs() > 1e-9 * dx.max(dy) {
            return Err(GridError::Geometry(format!("non-square cells: {dx} x {dy} degrees")));
        }
        Ok(GridGeometry { width, height, lon_min, lon_max, lat_min, lat_max })
    }

    /// The global 30 arc-second lattice: 43200 x 16800 cells covering
    /// longitudes -180..180 and latitudes -65..75.
    pub fn global_30_arcsec() -> Self {
        GridGeometry {
            width: 43_200,
            height: 16_800,
            lon_min: -180.0,
            lon_max: 180.0,
            lat_min: -65.0,
            lat_max: 75.0,
        }
    }

    pub fn cell_size(&self) -> f64 {
        (self.lon_max - self.lon_min) / self.width as f64
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Longitude of the center of column `i`.
    pub fn lon(&self, i: usize) -> f64 {
        self.lon_min + (i as f64 + 0.5) * self.cell_size()
    }

    /// Latitude of the center of row `j` (row 0 is north).
    pub fn lat(&self, j: usize) -> f64 {
        self.lat_max - (j as f64 + 0.5) * self.cell_size()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.width + i
    }

    /// (column, row) of a row-major pixel index.
    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    /// Sub-geometry covering columns `i0..i1` and rows `j0..j1`.
    pub fn crop(&self, i0: usize, i1: usize, j0: usize, j1: usize) -> Result<Self, GridError> {
        if i0 >= i1 || j0 >= j1 || i1 > self.width || j1 > self.height {
            return Err(GridError::Geometry(format!("crop {i0}..{i1} x {j0}..{j1} out of bounds")));
        }
        let c = self.cell_size();
        Ok(GridGeometry {
            width: i1 - i0,
            height: j1 - j0,
            lon_min: self.lon_min + i0 as f64 * c,
            lon_max: self.lon_min + i1 as f64 * c,
            lat_min: self.lat_max - j1 as f64 * c,
            lat_max: self.lat_max - j0 as f64 * c,
        })
    }

    pub(crate) fn write_le<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        for v in [self.lon_min, self.lon_max, self.lat_min, self.lat_max] {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Parses the 40-byte dims+extent block shared by the binary formats.
    pub(crate) fn read_le(bytes: &[u8]) -> Result<Self, GridError> {
        let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let f = |k: usize| f64::from_le_bytes(bytes[8 + 8 * k..16 + 8 * k].try_into().unwrap());
        GridGeometry::new(width, height, f(0), f(1), f(2), f(3))
            .map_err(|e| GridError::Format(format!("bad header geometry: {e}")))
    }
}

/// One year's luminosity composite.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    geometry: GridGeometry,
    year: i32,
    values: Vec<u8>,
    nodata: u8,
}

impl RasterGrid {
    pub fn new(geometry: GridGeometry, year: i32, values: Vec<u8>, nodata: u8) -> Result<Self, GridError> {
        if nodata <= MAX_DN {
            return Err(GridError::Format(format!("nodata sentinel {nodata} collides with the DN range")));
        }
        if values.len() != geometry.pixel_count() {
            return Err(GridError::Truncated { expected: geometry.pixel_count(), found: values.len() });
        }
        if let Some(index) = values.iter().position(|&v| v > MAX_DN && v != nodata) {
            return Err(GridError::Range { index, value: values[index] as i64, max: MAX_DN });
        }
        Ok(RasterGrid { geometry, year, values, nodata })
    }

    /// A grid filled with a single value.
    pub fn filled(geometry: GridGeometry, year: i32, value: u8) -> Result<Self, GridError> {
        Self::new(geometry, year, vec![value; geometry.pixel_count()], NODATA)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn year(&self) -> i32 {
        self.year
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn nodata(&self) -> u8 {
        self.nodata
    }

    /// DN at a pixel, `None` for nodata.
    #[inline]
    pub fn get(&self, index: usize) -> Option<u8> {
        let v = self.values[index];
        (v != self.nodata).then_some(v)
    }

    pub fn into_values(self) -> Vec<u8> {
        self.values
    }
}

/// Reads an NLG1 file.
pub fn load_raster(path: impl AsRef<Path>) -> Result<RasterGrid, GridError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| GridError::io(path, e))?;
    let file_len = file.metadata().map_err(|e| GridError::io(path, e))?.len() as usize;
    let mut r = BufReader::new(file);
    let mut header = [0u8; NLG1_HEADER_LEN];
    read_header(&mut r, &mut header, path)?;
    if &header[0..4] != NLG1_MAGIC {
        return Err(GridError::Format(format!("{}: bad magic {:?}", path.display(), &header[0..4])));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != NLG1_VERSION {
        return Err(GridError::Format(format!("unsupported NLG1 version {version}")));
    }
    let geometry = GridGeometry::read_le(&header[6..46])?;
    let year = u16::from_le_bytes([header[46], header[47]]) as i32;
    let dtype = header[48];
    if dtype != DTYPE_U8 {
        return Err(GridError::Format(format!("unsupported dtype {dtype}")));
    }
    let nodata = header[49];
    let expected = geometry.pixel_count();
    let found = file_len - NLG1_HEADER_LEN;
    if found != expected {
        return Err(GridError::Truncated { expected, found });
    }
    let mut values = vec![0u8; expected];
    r.read_exact(&mut values).map_err(|e| GridError::io(path, e))?;
    RasterGrid::new(geometry, year, values, nodata)
}

fn read_header<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<(), GridError> {
    match r.read_exact(buf) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
            Err(GridError::Format(format!("{}: file shorter than header", path.display())))
        }
        Err(e) => Err(GridError::io(path, e)),
    }
}

/// Writes an NLG1 file.
pub fn write_raster(grid: &RasterGrid, path: impl AsRef<Path>) -> Result<(), GridError> {
    let path = path.as_ref();
    let year = u16::try_from(grid.year)
        .map_err(|_| GridError::Format(format!("year {} does not fit the header", grid.year)))?;
    let file = File::create(path).map_err(|e| GridError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> io::Result<()> {
        w.write_all(NLG1_MAGIC)?;
        w.write_all(&NLG1_VERSION.to_le_bytes())?;
        grid.geometry.write_le(&mut w)?;
        w.write_all(&year.to_le_bytes())?;
        w.write_all(&[DTYPE_U8, grid.nodata])?;
        w.write_all(&[0u8; 6])?;
        w.write_all(&grid.values)?;
        w.flush()
    })();
    res.map_err(|e| GridError::io(path, e))
}

/// Imports an ESRI ASCII grid. Values outside 0..=63 are rejected, not clamped.
pub fn import_ascii_grid(path: impl AsRef<Path>, year: i32) -> Result<RasterGrid, GridError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| GridError::io(path, e))?;
    parse_ascii_grid(BufReader::new(file), year)
}

pub fn parse_ascii_grid<R: BufRead>(reader: R, year: i32) -> Result<RasterGrid, GridError> {
    let mut ncols: Option<usize> = None;
    let mut nrows: Option<usize> = None;
    let mut xll: Option<(f64, bool)> = None; // (value, is_center)
    let mut yll: Option<(f64, bool)> = None;
    let mut cellsize: Option<f64> = None;
    let mut nodata_value: Option<f64> = None;
    let mut cells: Vec<f64> = Vec::new();
    let mut in_header = true;

    let parse_num = |key: &str, tok: Option<&str>| -> Result<f64, GridError> {
        tok.and_then(|t| t.parse::<f64>().ok())
            .ok_or_else(|| GridError::Format(format!("malformed header value for {key}")))
    };

    for line in reader.lines() {
        let line = line.map_err(|e| GridError::Format(e.to_string()))?;
        let mut toks = line.split_whitespace();
        let Some(first) = toks.next() else { continue };
        if in_header && first.chars().next().is_some_and(|c| c.is_ascii_alphabetic()) {
            let key = first.to_ascii_lowercase();
            let v = parse_num(&key, toks.next())?;
            match key.as_str() {
                "ncols" => ncols = Some(v as usize),
                "nrows" => nrows = Some(v as usize),
                "xllcorner" => xll = Some((v, false)),
                "xllcenter" => xll = Some((v, true)),
                "yllcorner" => yll = Some((v, false)),
                "yllcenter" => yll = Some((v, true)),
                "cellsize" => cellsize = Some(v),
                "nodata_value" => nodata_value = Some(v),
                _ => return Err(GridError::Format(format!("unknown header key {first}"))),
            }
            continue;
        }
        in_header = false;
        for tok in std::iter::once(first).chain(toks) {
            let v = tok
                .parse::<f64>()
                .map_err(|_| GridError::Format(format!("non-numeric cell value {tok:?}")))?;
            cells.push(v);
        }
    }

    let missing = |k: &str| GridError::Format(format!("missing header key {k}"));
    let ncols = ncols.ok_or_else(|| missing("ncols"))?;
    let nrows = nrows.ok_or_else(|| missing("nrows"))?;
    let cellsize = cellsize.ok_or_else(|| missing("cellsize"))?;
    let (x, x_center) = xll.unwrap_or((0.0, false));
    let (y, y_center) = yll.unwrap_or((0.0, false));
    let lon_min = if x_center { x - 0.5 * cellsize } else { x };
    let lat_min = if y_center { y - 0.5 * cellsize } else { y };
    let geometry = GridGeometry::new(
        ncols,
        nrows,
        lon_min,
        lon_min + ncols as f64 * cellsize,
        lat_min,
        lat_min + nrows as f64 * cellsize,
    )
    .map_err(|e| GridError::Format(e.to_string()))?;

    if cells.len() != geometry.pixel_count() {
        return Err(GridError::Truncated { expected: geometry.pixel_count(), found: cells.len() });
    }
    let mut values = Vec::with_capacity(cells.len());
    for (index, &v) in cells.iter().enumerate() {
        if nodata_value == Some(v) {
            values.push(NODATA);
        } else if v.fract() != 0.0 {
            return Err(GridError::Format(format!("non-integer DN {v} at pixel {index}")));
        } else if !(0.0..=MAX_DN as f64).contains(&v) {
            return Err(GridError::Range { index, value: v as i64, max: MAX_DN });
        } else {
            values.push(v as u8);
        }
    }
    RasterGrid::new(geometry, year, values, NODATA)
}

/// Writes a grid as an ESRI ASCII grid (nodata written as -9999).
pub fn export_ascii_grid(grid: &RasterGrid, path: impl AsRef<Path>) -> Result<(), GridError> {
    let path = path.as_ref();
    let g = grid.geometry();
    let file = File::create(path).map_err(|e| GridError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> io::Result<()> {
        writeln!(w, "ncols {}", g.width)?;
        writeln!(w, "nrows {}", g.height)?;
        writeln!(w, "xllcorner {}", g.lon_min)?;
        writeln!(w, "yllcorner {}", g.lat_min)?;
        writeln!(w, "cellsize {}", g.cell_size())?;
        writeln!(w, "NODATA_value -9999")?;
        for row in grid.values().chunks(g.width) {
            let mut first = true;
            for &v in row {
                if !first {
                    w.write_all(b" ")?;
                }
                first = false;
                if v == grid.nodata() {
                    w.write_all(b"-9999")?;
                } else {
                    write!(w, "{v}")?;
                }
            }
            w.write_all(b"\n")?;
        }
        w.flush()
    })();
    res.map_err(|e| GridError::io(path, e))
}

/// Consecutive annual grids sharing one geometry.
#[derive(Debug, Clone)]
pub struct Panel {
    grids: Vec<RasterGrid>,
}

impl Panel {
    pub fn new(mut grids: Vec<RasterGrid>) -> Result<Self, GridError> {
        if grids.is_empty() {
            return Err(GridError::Sequence(Vec::new()));
        }
        grids.sort_by_key(|g| g.year);
        check_years(&grids.iter().map(|g| g.year).collect::<Vec<_>>())?;
        let geometry = grids[0].geometry;
        if let Some(g) = grids.iter().find(|g| g.geometry != geometry) {
            return Err(GridError::Shape(format!("year {} geometry differs from year {}", g.year, grids[0].year)));
        }
        Ok(Panel { grids })
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.grids[0].geometry
    }

    pub fn years(&self) -> Vec<i32> {
        self.grids.iter().map(|g| g.year).collect()
    }

    pub fn grids(&self) -> &[RasterGrid] {
        &self.grids
    }

    pub fn grid(&self, year: i32) -> Option<&RasterGrid> {
        self.grids.iter().find(|g| g.year == year)
    }
}

pub(crate) fn check_years(years: &[i32]) -> Result<(), GridError> {
    if years.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(GridError::Sequence(years.to_vec()));
    }
    Ok(())
}

/// A panel of NLG1 files in a directory, loaded one year at a time.
#[derive(Debug, Clone)]
pub struct PanelDir {
    geometry: GridGeometry,
    entries: Vec<(i32, PathBuf)>,
}

impl PanelDir {
    /// Scans `dir` for `*.nlg` files; the year comes from each header.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, GridError> {
        let dir = dir.as_ref();
        let mut entries = Vec::new();
        let mut geometry = None;
        for entry in std::fs::read_dir(dir).map_err(|e| GridError::io(dir, e))? {
            let path = entry.map_err(|e| GridError::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("nlg") {
                continue;
            }
            let (g, year) = read_nlg1_header(&path)?;
            match geometry {
                None => geometry = Some(g),
                Some(prev) if prev != g => {
                    return Err(GridError::Shape(format!("{} geometry differs", path.display())))
                }
                _ => {}
            }
            entries.push((year, path));
        }
        let geometry =
            geometry.ok_or_else(|| GridError::Format(format!("{}: no .nlg files", dir.display())))?;
        entries.sort();
        check_years(&entries.iter().map(|e| e.0).collect::<Vec<_>>())?;
        Ok(PanelDir { geometry, entries })
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.entries.iter().map(|e| e.1.as_path())
    }
}

fn read_nlg1_header(path: &Path) -> Result<(GridGeometry, i32), GridError> {
    let mut f = File::open(path).map_err(|e| GridError::io(path, e))?;
    let mut header = [0u8; NLG1_HEADER_LEN];
    read_header(&mut f, &mut header, path)?;
    if &header[0..4] != NLG1_MAGIC {
        return Err(GridError::Format(format!("{}: bad magic", path.display())));
    }
    let g = GridGeometry::read_le(&header[6..46])?;
    Ok((g, u16::from_le_bytes([header[46], header[47]]) as i32))
}

/// Anything that can hand out annual grids in year order.
///
/// Streaming consumers hold at most two grids at a time, so a directory-backed
/// source never needs the whole panel resident.
pub trait GridSource: Sync {
    fn geometry(&self) -> &GridGeometry;
    fn years(&self) -> Vec<i32>;
    fn load(&self, year: i32) -> Result<std::borrow::Cow<'_, RasterGrid>, GridError>;
}

impl GridSource for Panel {
    fn geometry(&self) -> &GridGeometry {
        Panel::geometry(self)
    }

    fn years(&self) -> Vec<i32> {
        Panel::years(self)
    }

    fn load(&self, year: i32) -> Result<std::borrow::Cow<'_, RasterGrid>, GridError> {
        self.grid(year)
            .map(std::borrow::Cow::Borrowed)
            .ok_or_else(|| GridError::Sequence(vec![year]))
    }
}

impl GridSource for PanelDir {
    fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    fn years(&self) -> Vec<i32> {
        self.entries.iter().map(|e| e.0).collect()
    }

    fn load(&self, year: i32) -> Result<std::borrow::Cow<'_, RasterGrid>, GridError> {
        let (_, path) = self
            .entries
            .iter()
            .find(|e| e.0 == year)
            .ok_or_else(|| GridError::Sequence(vec![year]))?;
        let grid = load_raster(path)?;
        if grid.geometry != self.geometry {
            return Err(GridError::Shape(format!("{} changed since scan", path.display())));
        }
        Ok(std::borrow::Cow::Owned(grid))
    }
}

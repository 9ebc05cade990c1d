//! Pixel-to-region assignment and analysis scopes.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, GridGeometry};

pub const RMSK_MAGIC: &[u8; 4] = b"RMSK";
pub const RMSK_VERSION: u16 = 1;
const RMSK_HEADER_LEN: usize = 46;

#[derive(Debug, Error)]
pub enum RegionError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("region table: {0}")]
    Table(String),
    #[error("mask inconsistent with table: {0}")]
    Consistency(String),
    #[error("unknown region id {0}")]
    UnknownRegion(u16),
    #[error("unknown region name {0:?}")]
    UnknownName(String),
    #[error("mask geometry does not match the panel")]
    GeometryMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Country,
    State,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub id: u16,
    pub name: String,
    pub kind: RegionKind,
}

/// Where a statistic is computed: every pixel, or the pixels of one region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scope {
    World,
    Region(u16),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::World => f.write_str("World"),
            Scope::Region(id) => write!(f, "region {id}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegionMask {
    geometry: GridGeometry,
    ids: Vec<u16>,
    table: Vec<Region>,
    by_id: HashMap<u16, usize>,
}

impl RegionMask {
    pub fn new(geometry: GridGeometry, ids: Vec<u16>, table: Vec<Region>) -> Result<Self, RegionError> {
        if ids.len() != geometry.pixel_count() {
            return Err(GridError::Truncated { expected: geometry.pixel_count(), found: ids.len() }.into());
        }
        let mut by_id = HashMap::with_capacity(table.len());
        for (k, r) in table.iter().enumerate() {
            if r.id == 0 {
                return Err(RegionError::Consistency("id 0 is reserved for unassigned pixels".into()));
            }
            if by_id.insert(r.id, k).is_some() {
                return Err(RegionError::Consistency(format!("duplicate region id {}", r.id)));
            }
        }
        let mut seen = vec![false; u16::MAX as usize + 1];
        for &id in &ids {
            seen[id as usize] = true;
        }
        if let Some(id) = (1..seen.len()).find(|&id| seen[id] && !by_id.contains_key(&(id as u16))) {
            return Err(RegionError::Consistency(format!("id {id} in mask is missing from the table")));
        }
        Ok(RegionMask { geometry, ids, table, by_id })
    }

    /// A mask with no regions; only the World scope is available.
    pub fn world_only(geometry: GridGeometry) -> Self {
        RegionMask { geometry, ids: vec![0; geometry.pixel_count()], table: Vec::new(), by_id: HashMap::new() }
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn table(&self) -> &[Region] {
        &self.table
    }

    pub fn region(&self, id: u16) -> Option<&Region> {
        self.by_id.get(&id).map(|&k| &self.table[k])
    }

    pub fn check_geometry(&self, other: &GridGeometry) -> Result<(), RegionError> {
        if &self.geometry != other {
            return Err(RegionError::GeometryMismatch);
        }
        Ok(())
    }

    pub fn validate_scope(&self, scope: Scope) -> Result<(), RegionError> {
        match scope {
            Scope::World => Ok(()),
            Scope::Region(id) if self.by_id.contains_key(&id) => Ok(()),
            Scope::Region(id) => Err(RegionError::UnknownRegion(id)),
        }
    }

    /// Resolves "World" or a region name from the table.
    pub fn scope_by_name(&self, name: &str) -> Result<Scope, RegionError> {
        if name.eq_ignore_ascii_case("world") {
            return Ok(Scope::World);
        }
        self.table
            .iter()
            .find(|r| r.name == name)
            .map(|r| Scope::Region(r.id))
            .ok_or_else(|| RegionError::UnknownName(name.to_string()))
    }

    pub fn scope_name(&self, scope: Scope) -> String {
        match scope {
            Scope::World => "World".to_string(),
            Scope::Region(id) => self.region(id).map_or_else(|| format!("region {id}"), |r| r.name.clone()),
        }
    }

    /// Whether pixel `index` belongs to `scope`.
    #[inline]
    pub fn contains(&self, scope: Scope, index: usize) -> bool {
        match scope {
            Scope::World => true,
            Scope::Region(id) => self.ids[index] == id,
        }
    }

    /// Pixel indices of a scope in row-major order.
    pub fn pixels_in(&self, scope: Scope) -> Result<impl Iterator<Item = usize> + '_, RegionError> {
        self.validate_scope(scope)?;
        Ok((0..self.ids.len()).filter(move |&k| self.contains(scope, k)))
    }

    /// Bounding box `(i0, i1, j0, j1)` (half-open) of a scope's pixels.
    pub fn bounding_box(&self, scope: Scope) -> Result<Option<(usize, usize, usize, usize)>, RegionError> {
        let w = self.geometry.width;
        let mut bbox: Option<(usize, usize, usize, usize)> = None;
        for k in self.pixels_in(scope)? {
            let (i, j) = (k % w, k / w);
            bbox = Some(match bbox {
                None => (i, i + 1, j, j + 1),
                Some((a, b, c, d)) => (a.min(i), b.max(i + 1), c.min(j), d.max(j + 1)),
            });
        }
        Ok(bbox)
    }
}

/// Reads an RMSK id grid and its CSV region table.
pub fn load_mask(raster_path: impl AsRef<Path>, table_path: impl AsRef<Path>) -> Result<RegionMask, RegionError> {
    let table = load_region_table(table_path)?;
    let path = raster_path.as_ref();
    let file = File::open(path).map_err(|e| GridError::io(path, e))?;
    let file_len = file.metadata().map_err(|e| GridError::io(path, e))?.len() as usize;
    let mut r = BufReader::new(file);
    let mut header = [0u8; RMSK_HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|_| GridError::Format(format!("{}: file shorter than header", path.display())))?;
    if &header[0..4] != RMSK_MAGIC {
        return Err(GridError::Format(format!("{}: bad magic", path.display())).into());
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != RMSK_VERSION {
        return Err(GridError::Format(format!("unsupported RMSK version {version}")).into());
    }
    let geometry = GridGeometry::read_le(&header[6..46])?;
    let expected = geometry.pixel_count() * 2;
    let found = file_len - RMSK_HEADER_LEN;
    if found != expected {
        return Err(GridError::Truncated { expected, found }.into());
    }
    let mut raw = vec![0u8; expected];
    r.read_exact(&mut raw).map_err(|e| GridError::io(path, e))?;
    let ids = raw.chunks_exact(2).map(|b| u16::from_le_bytes([b[0], b[1]])).collect();
    RegionMask::new(geometry, ids, table)
}

pub fn load_region_table(path: impl AsRef<Path>) -> Result<Vec<Region>, RegionError> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| RegionError::Table(format!("{}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| RegionError::Table(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "name", "kind"] {
        return Err(RegionError::Table(format!("expected header id,name,kind, got {headers:?}")));
    }
    rdr.deserialize()
        .map(|row| row.map_err(|e| RegionError::Table(e.to_string())))
        .collect()
}

pub fn write_mask(
    mask: &RegionMask,
    raster_path: impl AsRef<Path>,
    table_path: impl AsRef<Path>,
) -> Result<(), RegionError> {
    let path = raster_path.as_ref();
    let file = File::create(path).map_err(|e| GridError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        w.write_all(RMSK_MAGIC)?;
        w.write_all(&RMSK_VERSION.to_le_bytes())?;
        mask.geometry.write_le(&mut w)?;
        for &id in &mask.ids {
            w.write_all(&id.to_le_bytes())?;
        }
        w.flush()
    })();
    res.map_err(|e| GridError::io(path, e))?;

    let tpath = table_path.as_ref();
    let mut wtr = csv::Writer::from_path(tpath).map_err(|e| RegionError::Table(e.to_string()))?;
    for r in &mask.table {
        wtr.serialize(r).map_err(|e| RegionError::Table(e.to_string()))?;
    }
    if mask.table.is_empty() {
        wtr.write_record(["id", "name", "kind"]).map_err(|e| RegionError::Table(e.to_string()))?;
    }
    wtr.flush().map_err(|e| GridError::io(tpath, e))?;
    Ok(())
}

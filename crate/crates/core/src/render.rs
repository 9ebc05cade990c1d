//! Diverging-color change maps.
//!
//! Negative change ramps from black to blue, positive change from black to
//! red, with intensity proportional to `|value| / (clamp * sigma)`. Values
//! beyond the clamp are painted with fixed extreme colors (cyan, orange).

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::grid::GridGeometry;
use crate::pipeline::CumulativeChangeGrid;

pub type Rgb = [u8; 3];

pub const DEFAULT_MAX_WIDTH: usize = 4320;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("change grid has no valued pixels")]
    Empty,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("png encoding: {0}")]
    Png(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RenderError + '_ {
    move |source| RenderError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Palette {
    /// Full-intensity end of the negative ramp.
    pub negative: Rgb,
    /// Full-intensity end of the positive ramp.
    pub positive: Rgb,
    pub extreme_negative: Rgb,
    pub extreme_positive: Rgb,
    pub neutral: Rgb,
    /// Ramp saturation point in multiples of the reference sigma.
    pub clamp: f64,
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            negative: [0, 0, 255],
            positive: [255, 0, 0],
            extreme_negative: [0, 255, 255],
            extreme_positive: [255, 165, 0],
            neutral: [0, 0, 0],
            clamp: 3.0,
        }
    }
}

impl Palette {
    pub fn with_clamp(clamp: f64) -> Result<Self, RenderError> {
        if !(clamp > 0.0) || !clamp.is_finite() {
            return Err(RenderError::Argument(format!("clamp {clamp} must be positive")));
        }
        Ok(Palette { clamp, ..Palette::default() })
    }

    fn color_unchecked(&self, value: f64, sigma_ref: f64) -> Rgb {
        if value.is_nan() || value == 0.0 {
            return self.neutral;
        }
        let limit = self.clamp * sigma_ref;
        let mag = value.abs();
        if mag > limit {
            return if value > 0.0 { self.extreme_positive } else { self.extreme_negative };
        }
        let end = if value > 0.0 { self.positive } else { self.negative };
        let t = mag / limit;
        end.map(|c| (c as f64 * t).round() as u8)
    }
}

/// Color of one value against a reference sigma. `NaN` means no value.
pub fn color_of(value: f64, sigma_ref: f64, palette: &Palette) -> Result<Rgb, RenderError> {
    if !(sigma_ref > 0.0) || !sigma_ref.is_finite() {
        return Err(RenderError::Argument(format!("reference sigma {sigma_ref} must be positive")));
    }
    Ok(palette.color_unchecked(value, sigma_ref))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    /// RGB triplets, row-major from the top row.
    pub data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        ImageBuffer { width, height, data: vec![0; 3 * width * height] }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: &[Rgb]) -> Result<Self, RenderError> {
        if pixels.len() != width * height {
            return Err(RenderError::Argument(format!("{} pixels for a {width}x{height} image", pixels.len())));
        }
        Ok(ImageBuffer { width, height, data: pixels.concat() })
    }

    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let k = 3 * (y * self.width + x);
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, c: Rgb) {
        let k = 3 * (y * self.width + x);
        self.data[k..k + 3].copy_from_slice(&c);
    }

    pub fn pixels(&self) -> impl Iterator<Item = Rgb> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }
}

/// Population standard deviation of the valued pixels.
pub fn reference_sigma(grid: &CumulativeChangeGrid) -> Result<f64, RenderError> {
    let (mut n, mut sum) = (0usize, 0.0);
    for (_, v) in grid.valued() {
        n += 1;
        sum += v;
    }
    if n == 0 {
        return Err(RenderError::Empty);
    }
    let mean = sum / n as f64;
    let ss: f64 = grid.valued().map(|(_, v)| (v - mean) * (v - mean)).sum();
    Ok((ss / n as f64).sqrt())
}

/// Renders with the grid's own sigma as reference.
///
/// A grid whose valued pixels are all equal has zero sigma; its zeros stay
/// neutral and any nonzero value is painted as an extreme.
pub fn render_change_map(grid: &CumulativeChangeGrid, palette: &Palette) -> Result<ImageBuffer, RenderError> {
    let sigma = reference_sigma(grid)?;
    Ok(render_with_sigma(grid, sigma, palette))
}

pub fn render_with_sigma(grid: &CumulativeChangeGrid, sigma_ref: f64, palette: &Palette) -> ImageBuffer {
    let w = grid.geometry.width;
    let mut img = ImageBuffer::new(w, grid.geometry.height);
    img.data.par_chunks_mut(3 * w).zip(grid.values.par_chunks(w)).for_each(|(row, vals)| {
        for (px, &v) in row.chunks_exact_mut(3).zip(vals) {
            px.copy_from_slice(&palette.color_unchecked(v, sigma_ref));
        }
    });
    img
}

/// Block-mean reduction so the width is at most `max_width`.
pub fn downsample(grid: &CumulativeChangeGrid, max_width: usize) -> Result<CumulativeChangeGrid, RenderError> {
    if max_width == 0 {
        return Err(RenderError::Argument("max width must be positive".into()));
    }
    let g = &grid.geometry;
    let b = g.width.div_ceil(max_width);
    if b == 1 {
        return Ok(grid.clone());
    }
    let (nw, nh) = (g.width.div_ceil(b), g.height.div_ceil(b));
    let c = g.cell_size() * b as f64;
    let geometry = GridGeometry::new(nw, nh, g.lon_min, g.lon_min + nw as f64 * c, g.lat_max - nh as f64 * c, g.lat_max)
        .map_err(|e| RenderError::Argument(e.to_string()))?;
    let mut values = vec![f64::NAN; nw * nh];
    values.par_chunks_mut(nw).enumerate().for_each(|(by, out)| {
        let mut sum = vec![0.0; nw];
        let mut cnt = vec![0u32; nw];
        for y in by * b..((by + 1) * b).min(g.height) {
            for (x, &v) in grid.values[y * g.width..(y + 1) * g.width].iter().enumerate() {
                if !v.is_nan() {
                    sum[x / b] += v;
                    cnt[x / b] += 1;
                }
            }
        }
        for ((o, s), n) in out.iter_mut().zip(sum).zip(cnt) {
            if n > 0 {
                *o = s / n as f64;
            }
        }
    });
    Ok(CumulativeChangeGrid { geometry, years: grid.years, scope: grid.scope, values })
}

/// Sub-grid covering columns `i0..i1` and rows `j0..j1`.
pub fn crop_change_grid(
    grid: &CumulativeChangeGrid,
    (i0, i1, j0, j1): (usize, usize, usize, usize),
) -> Result<CumulativeChangeGrid, RenderError> {
    let geometry = grid.geometry.crop(i0, i1, j0, j1).map_err(|e| RenderError::Argument(e.to_string()))?;
    let w = grid.geometry.width;
    let values = (j0..j1).flat_map(|j| grid.values[j * w + i0..j * w + i1].iter().copied()).collect();
    Ok(CumulativeChangeGrid { geometry, years: grid.years, scope: grid.scope, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "ppm" => Some(ImageFormat::Ppm),
            "png" => Some(ImageFormat::Png),
            _ => None,
        }
    }
}

pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer, String> {
    // Header tokens are separated by single whitespace bytes in our writer;
    // the reader accepts any whitespace run and `#` comments.
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ascii header")?.to_string());
    }
    if tokens[0] != "P6" {
        return Err(format!("magic {:?}, expected P6", tokens[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field {s:?}"));
    let (w, h, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported"));
    }
    pos += 1;
    let need = 3 * w * h;
    let data = bytes.get(pos..).filter(|d| d.len() == need).ok_or_else(|| {
        format!("payload has {} bytes, expected {need}", bytes.len().saturating_sub(pos))
    })?;
    Ok(ImageBuffer { width: w, height: h, data: data.to_vec() })
}

pub fn write_ppm(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<(), RenderError> {
    let path = path.as_ref();
    let mut f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    f.write_all(&encode_ppm(img)).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageBuffer, RenderError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io_err(path))?;
    decode_ppm(&bytes).map_err(|msg| RenderError::Format { path: path.to_path_buf(), msg })
}

pub fn write_png(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<(), RenderError> {
    let path = path.as_ref();
    let f = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let mut enc = png::Encoder::new(f, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| RenderError::Png(e.to_string()))?;
    w.write_image_data(&img.data).map_err(|e| RenderError::Png(e.to_string()))?;
    w.finish().map_err(|e| RenderError::Png(e.to_string()))
}

pub fn write_image(img: &ImageBuffer, path: impl AsRef<Path>, format: ImageFormat) -> Result<(), RenderError> {
    match format {
        ImageFormat::Ppm => write_ppm(img, path),
        ImageFormat::Png => write_png(img, path),
    }
}

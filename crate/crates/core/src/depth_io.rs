//! Integer depth maps: containers, file formats, point-cloud projection and
//! hole filling.
//!
//! Invalid pixels always carry the value 0. Files do not store a mask; it is
//! recomputed as `value != 0` on load.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub const MIN_BIT_DEPTH: u8 = 8;
pub const MAX_BIT_DEPTH: u8 = 24;
/// Micrometres per depth unit when nothing else is known (1 mm).
pub const DEFAULT_PRECISION: u32 = 1000;

const HPDM_MAGIC: &[u8; 4] = b"HPDM";
const HPDM_HEADER_LEN: usize = 12;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    bit_depth: u8,
    precision: u32,
    data: Vec<u32>,
    mask: Vec<bool>,
}

impl DepthMap {
    /// Builds a map whose mask is derived from the data (`value != 0`).
    pub fn new(
        width: usize,
        height: usize,
        bit_depth: u8,
        precision: u32,
        data: Vec<u32>,
    ) -> Result<Self> {
        let mask = data.iter().map(|&v| v != 0).collect();
        Self::with_mask(width, height, bit_depth, precision, data, mask)
    }

    /// Builds a map from raw values and an explicit validity mask. Values
    /// under an invalid mask are forced to zero.
    pub fn with_mask(
        width: usize,
        height: usize,
        bit_depth: u8,
        precision: u32,
        mut data: Vec<u32>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        check_bit_depth(bit_depth)?;
        if width == 0 || height == 0 {
            return Err(Error::shape(format!("empty map {width}x{height}")));
        }
        if data.len() != width * height || mask.len() != width * height {
            return Err(Error::shape(format!(
                "expected {} values for {width}x{height}, got data {} / mask {}",
                width * height,
                data.len(),
                mask.len()
            )));
        }
        if precision == 0 {
            return Err(Error::argument("precision must be positive"));
        }
        let limit = 1u64 << bit_depth;
        for (v, &m) in data.iter_mut().zip(&mask) {
            if !m {
                *v = 0;
            } else if u64::from(*v) >= limit {
                return Err(Error::Range {
                    value: u64::from(*v),
                    bits: bit_depth,
                });
            }
        }
        Ok(DepthMap {
            width,
            height,
            bit_depth,
            precision,
            data,
            mask,
        })
    }

    /// An all-invalid map.
    pub fn empty(width: usize, height: usize, bit_depth: u8, precision: u32) -> Result<Self> {
        Self::new(width, height, bit_depth, precision, vec![0; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bit_depth(&self) -> u8 {
        self.bit_depth
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.data[row * self.width + col]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    pub fn max_value(&self) -> u32 {
        ((1u64 << self.bit_depth) - 1) as u32
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Copies a `width x height` window starting at (`row`, `col`).
    pub fn crop(&self, row: usize, col: usize, width: usize, height: usize) -> Result<Self> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::shape(format!(
                "crop {width}x{height}@({row},{col}) outside {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height);
        let mut mask = Vec::with_capacity(width * height);
        for r in row..row + height {
            let start = r * self.width + col;
            data.extend_from_slice(&self.data[start..start + width]);
            mask.extend_from_slice(&self.mask[start..start + width]);
        }
        Self::with_mask(width, height, self.bit_depth, self.precision, data, mask)
    }
}

fn check_bit_depth(bits: u8) -> Result<()> {
    if !(MIN_BIT_DEPTH..=MAX_BIT_DEPTH).contains(&bits) {
        return Err(Error::argument(format!(
            "bit depth {bits} outside {MIN_BIT_DEPTH}..={MAX_BIT_DEPTH}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepthFormat {
    Raw16,
    Raw32,
    Pgm16,
}

impl DepthFormat {
    /// Guesses the format from a file extension (`.pgm` or HPDM otherwise).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("pgm") => DepthFormat::Pgm16,
            _ => DepthFormat::Raw16,
        }
    }
}

pub fn load_depth(path: impl AsRef<Path>, format: DepthFormat) -> Result<DepthMap> {
    let bytes = fs::read(path)?;
    decode_depth(&bytes, format)
}

pub fn save_depth(map: &DepthMap, path: impl AsRef<Path>, format: DepthFormat) -> Result<()> {
    let bytes = encode_depth(map, format)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Decodes a depth file held in memory. For HPDM the declared word size
/// must agree with `format`, except that `Raw16` accepts either word size.
pub fn decode_depth(bytes: &[u8], format: DepthFormat) -> Result<DepthMap> {
    match format {
        DepthFormat::Raw16 | DepthFormat::Raw32 => decode_hpdm(bytes, format),
        DepthFormat::Pgm16 => decode_pgm(bytes),
    }
}

pub fn encode_depth(map: &DepthMap, format: DepthFormat) -> Result<Vec<u8>> {
    match format {
        DepthFormat::Raw16 => encode_hpdm(map, 2),
        DepthFormat::Raw32 => encode_hpdm(map, 4),
        DepthFormat::Pgm16 => encode_pgm(map),
    }
}

fn encode_hpdm(map: &DepthMap, word: u8) -> Result<Vec<u8>> {
    if word == 2 && map.bit_depth > 16 {
        return Err(Error::format(format!(
            "{}-bit map does not fit 16-bit words",
            map.bit_depth
        )));
    }
    let width = u16::try_from(map.width).map_err(|_| Error::format("width exceeds u16"))?;
    let height = u16::try_from(map.height).map_err(|_| Error::format("height exceeds u16"))?;
    // The reserved field carries the precision; 0 stands for 1 mm.
    let precision = if map.precision == DEFAULT_PRECISION {
        0
    } else {
        u16::try_from(map.precision)
            .map_err(|_| Error::format("precision exceeds the HPDM header field"))?
    };
    let mut out = Vec::with_capacity(HPDM_HEADER_LEN + map.data.len() * word as usize);
    out.extend_from_slice(HPDM_MAGIC);
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    out.push(map.bit_depth);
    out.push(word);
    out.extend_from_slice(&precision.to_le_bytes());
    for &v in &map.data {
        if word == 2 {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        } else {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode_hpdm(bytes: &[u8], format: DepthFormat) -> Result<DepthMap> {
    if bytes.len() < HPDM_HEADER_LEN {
        return Err(Error::format("truncated HPDM header"));
    }
    if &bytes[..4] != HPDM_MAGIC {
        return Err(Error::format("bad HPDM magic"));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    let height = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let bit_depth = bytes[8];
    let word = bytes[9];
    let precision = match u16::from_le_bytes([bytes[10], bytes[11]]) {
        0 => DEFAULT_PRECISION,
        p => u32::from(p),
    };
    match (format, word) {
        (DepthFormat::Raw16, 2) | (DepthFormat::Raw16, 4) | (DepthFormat::Raw32, 4) => {}
        _ => {
            return Err(Error::format(format!(
                "HPDM word size {word} does not match {format:?}"
            )))
        }
    }
    if word == 2 && bit_depth > 16 {
        return Err(Error::format("bit depth above 16 in a 16-bit container"));
    }
    check_bit_depth(bit_depth).map_err(|_| Error::format(format!("bad bit depth {bit_depth}")))?;
    let payload = &bytes[HPDM_HEADER_LEN..];
    let count = width * height;
    if payload.len() != count * word as usize {
        return Err(Error::format(format!(
            "payload of {} bytes, expected {}",
            payload.len(),
            count * word as usize
        )));
    }
    let data: Vec<u32> = if word == 2 {
        payload
            .chunks_exact(2)
            .map(|c| u32::from(u16::from_le_bytes([c[0], c[1]])))
            .collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    };
    DepthMap::new(width, height, bit_depth, precision, data)
}

fn encode_pgm(map: &DepthMap) -> Result<Vec<u8>> {
    if map.bit_depth > 16 {
        return Err(Error::format("PGM holds at most 16 bits per sample"));
    }
    let maxval = map.max_value();
    let mut out = format!("P5\n{} {}\n{}\n", map.width, map.height, maxval).into_bytes();
    for &v in &map.data {
        if maxval > 255 {
            out.extend_from_slice(&(v as u16).to_be_bytes());
        } else {
            out.push(v as u8);
        }
    }
    Ok(out)
}

fn decode_pgm(bytes: &[u8]) -> Result<DepthMap> {
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated PGM header"));
        }
        fields.push(&bytes[start..pos]);
    }
    if fields[0] != b"P5" {
        return Err(Error::format("not a binary PGM (P5)"));
    }
    let parse = |f: &[u8], what: &str| -> Result<usize> {
        std::str::from_utf8(f)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(format!("bad PGM {what}")))
    };
    let width = parse(fields[1], "width")?;
    let height = parse(fields[2], "height")?;
    let maxval = parse(fields[3], "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(format!("PGM maxval {maxval} out of range")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let bit_depth = ((usize::BITS - maxval.leading_zeros()) as u8).max(MIN_BIT_DEPTH);
    let word = if maxval > 255 { 2 } else { 1 };
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != width * height * word {
        return Err(Error::format(format!(
            "PGM raster of {} bytes, expected {}",
            raster.len(),
            width * height * word
        )));
    }
    let data: Vec<u32> = if word == 2 {
        raster
            .chunks_exact(2)
            .map(|c| u32::from(u16::from_be_bytes([c[0], c[1]])))
            .collect()
    } else {
        raster.iter().map(|&b| u32::from(b)).collect()
    };
    if let Some(&v) = data.iter().find(|&&v| v as usize > maxval) {
        return Err(Error::Range {
            value: u64::from(v),
            bits: bit_depth,
        });
    }
    DepthMap::new(width, height, bit_depth, DEFAULT_PRECISION, data)
}

/// Converts a metric depth into integer units of `precision` micrometres,
/// rounding halves away from zero.
pub fn quantize(depth_m: f64, precision: u32, bit_depth: u8) -> Result<u32> {
    if !(depth_m >= 0.0) || !depth_m.is_finite() {
        return Err(Error::argument(format!("depth {depth_m} must be finite and >= 0")));
    }
    if precision == 0 {
        return Err(Error::argument("precision must be positive"));
    }
    let units = (depth_m * (1e6 / f64::from(precision))).round();
    if units >= (1u64 << bit_depth) as f64 {
        return Err(Error::Range {
            value: units as u64,
            bits: bit_depth,
        });
    }
    Ok(units as u32)
}

/// Spherical binning of a rotating LiDAR sweep into a range image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionConfig {
    pub rows: usize,
    pub cols: usize,
    /// Upper edge of the vertical field of view, radians.
    pub elev_max: f64,
    /// Lower edge of the vertical field of view, radians.
    pub elev_min: f64,
    /// Points farther than this (metres) are dropped.
    pub max_range: f64,
}

impl Default for ProjectionConfig {
    /// 64-beam sensor, 2048 azimuth bins, +2 to -24.8 degrees.
    fn default() -> Self {
        ProjectionConfig {
            rows: 64,
            cols: 2048,
            elev_max: 2.0f64.to_radians(),
            elev_min: (-24.8f64).to_radians(),
            max_range: 120.0,
        }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::argument("projection needs at least one row and column"));
        }
        if !(self.elev_max > self.elev_min) {
            return Err(Error::argument("elev_max must exceed elev_min"));
        }
        if !(self.max_range > 0.0) {
            return Err(Error::argument("max_range must be positive"));
        }
        Ok(())
    }

    /// (row, col) cell of a point, or `None` for the origin.
    pub fn cell(&self, x: f64, y: f64, z: f64) -> Option<(usize, usize)> {
        let planar = x.hypot(y);
        if planar == 0.0 && z == 0.0 {
            return None;
        }
        let azimuth = y.atan2(x);
        let col = ((0.5 - azimuth / (2.0 * PI)) * self.cols as f64).floor() as i64;
        let col = col.rem_euclid(self.cols as i64) as usize;
        let elevation = z.atan2(planar);
        let row = ((self.elev_max - elevation) / (self.elev_max - self.elev_min) * self.rows as f64)
            .floor();
        let row = row.clamp(0.0, (self.rows - 1) as f64) as usize;
        Some((row, col))
    }
}

/// Projects points (metres) into a range image; the nearest point wins each
/// cell and empty cells stay invalid.
pub fn project_pointcloud(
    points: &[[f32; 3]],
    cfg: &ProjectionConfig,
    precision: u32,
    bit_depth: u8,
) -> Result<DepthMap> {
    cfg.validate()?;
    check_bit_depth(bit_depth)?;
    let mut nearest = vec![f64::INFINITY; cfg.rows * cfg.cols];
    for p in points {
        let (x, y, z) = (f64::from(p[0]), f64::from(p[1]), f64::from(p[2]));
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::argument("non-finite point coordinate"));
        }
        let range = (x * x + y * y + z * z).sqrt();
        if range > cfg.max_range {
            continue;
        }
        if let Some((row, col)) = cfg.cell(x, y, z) {
            let slot = &mut nearest[row * cfg.cols + col];
            if range < *slot {
                *slot = range;
            }
        }
    }
    let mut data = Vec::with_capacity(nearest.len());
    for &r in &nearest {
        data.push(if r.is_finite() {
            quantize(r, precision, bit_depth)?
        } else {
            0
        });
    }
    DepthMap::new(cfg.cols, cfg.rows, bit_depth, precision, data)
}

/// Reads little-endian `f32` (x, y, z, intensity) records; intensity is dropped.
pub fn load_pointcloud(path: impl AsRef<Path>) -> Result<Vec<[f32; 3]>> {
    let bytes = fs::read(path)?;
    decode_pointcloud(&bytes)
}

pub fn decode_pointcloud(bytes: &[u8]) -> Result<Vec<[f32; 3]>> {
    if bytes.len() % 16 != 0 {
        return Err(Error::format(format!(
            "point cloud of {} bytes is not a whole number of 16-byte records",
            bytes.len()
        )));
    }
    let f = |c: &[u8]| f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
    Ok(bytes
        .chunks_exact(16)
        .map(|rec| [f(&rec[0..4]), f(&rec[4..8]), f(&rec[8..12])])
        .collect())
}

/// Fills each invalid pixel with the lower median of the valid pixels in its
/// `window x window` neighbourhood of the original map.
pub fn median_fill(map: &DepthMap, window: usize) -> Result<DepthMap> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::argument(format!(
            "median window must be odd and >= 3, got {window}"
        )));
    }
    let half = window / 2;
    let (w, h) = (map.width, map.height);
    let mut data = map.data.clone();
    let mut mask = map.mask.clone();
    let mut neighbours = Vec::with_capacity(window * window);
    for row in 0..h {
        for col in 0..w {
            if map.mask[row * w + col] {
                continue;
            }
            neighbours.clear();
            for r in row.saturating_sub(half)..(row + half + 1).min(h) {
                for c in col.saturating_sub(half)..(col + half + 1).min(w) {
                    if map.mask[r * w + c] {
                        neighbours.push(map.data[r * w + c]);
                    }
                }
            }
            if neighbours.is_empty() {
                continue;
            }
            let mid = (neighbours.len() - 1) / 2;
            let (_, &mut median, _) = neighbours.select_nth_unstable(mid);
            data[row * w + col] = median;
            mask[row * w + col] = true;
        }
    }
    DepthMap::with_mask(w, h, map.bit_depth, map.precision, data, mask)
}

/// Piecewise-smooth synthetic depth: tilted planes separated by sharp edges,
/// light sensor noise and a few invalid holes.
pub fn synthetic_map<R: Rng>(width: usize, height: usize, bit_depth: u8, rng: &mut R) -> DepthMap {
    let max = ((1u64 << bit_depth) - 1) as f64;
    let plane = |rng: &mut R| {
        let base = rng.gen_range(0.1..0.8) * max;
        let gx = rng.gen_range(-0.15..0.15) * max / width as f64;
        let gy = rng.gen_range(-0.15..0.15) * max / height as f64;
        (base, gx, gy)
    };
    let mut planes = vec![plane(rng)];
    // each region is a half-plane or a rectangle painted over earlier ones
    enum Region {
        Half { nx: f64, ny: f64, off: f64 },
        Rect { r0: usize, r1: usize, c0: usize, c1: usize },
    }
    let regions: Vec<Region> = (0..rng.gen_range(2..6))
        .map(|_| {
            planes.push(plane(rng));
            if rng.gen_bool(0.5) {
                let angle: f64 = rng.gen_range(0.0..2.0 * PI);
                Region::Half {
                    nx: angle.cos(),
                    ny: angle.sin(),
                    off: rng.gen_range(-0.3..0.3) * (width.max(height) as f64),
                }
            } else {
                let r0 = rng.gen_range(0..height);
                let c0 = rng.gen_range(0..width);
                Region::Rect {
                    r0,
                    r1: (r0 + rng.gen_range(1..=height / 2 + 1)).min(height),
                    c0,
                    c1: (c0 + rng.gen_range(1..=width / 2 + 1)).min(width),
                }
            }
        })
        .collect();
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let mut data = vec![0u32; width * height];
    for row in 0..height {
        for col in 0..width {
            let mut idx = 0;
            for (i, region) in regions.iter().enumerate() {
                let inside = match *region {
                    Region::Half { nx, ny, off } => {
                        (col as f64 - cx) * nx + (row as f64 - cy) * ny > off
                    }
                    Region::Rect { r0, r1, c0, c1 } => {
                        (r0..r1).contains(&row) && (c0..c1).contains(&col)
                    }
                };
                if inside {
                    idx = i + 1;
                }
            }
            let (base, gx, gy) = planes[idx];
            let noise = rng.gen_range(-2.0..=2.0);
            let v = base + gx * (col as f64 - cx) + gy * (row as f64 - cy) + noise;
            data[row * width + col] = v.round().clamp(1.0, max) as u32;
        }
    }
    for _ in 0..rng.gen_range(0..4) {
        let r0 = rng.gen_range(0..height);
        let c0 = rng.gen_range(0..width);
        let r1 = (r0 + rng.gen_range(1..=height / 8 + 1)).min(height);
        let c1 = (c0 + rng.gen_range(1..=width / 8 + 1)).min(width);
        for row in r0..r1 {
            for col in c0..c1 {
                data[row * width + col] = 0;
            }
        }
    }
    DepthMap::new(width, height, bit_depth, DEFAULT_PRECISION, data).expect("values clamped to range")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn raw16_file(w: u16, h: u16, bits: u8, values: &[u16]) -> Vec<u8> {
        let mut out = b"HPDM".to_vec();
        out.extend_from_slice(&w.to_le_bytes());
        out.extend_from_slice(&h.to_le_bytes());
        out.push(bits);
        out.push(2);
        out.extend_from_slice(&0u16.to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    #[test]
    fn raw16_decode_sets_mask_from_zero() {
        let bytes = raw16_file(2, 2, 16, &[100, 0, 7, 65535]);
        let map = decode_depth(&bytes, DepthFormat::Raw16).unwrap();
        assert_eq!(map.data(), &[100, 0, 7, 65535]);
        assert_eq!(map.mask(), &[true, false, true, true]);
    }

    #[test]
    fn raw16_value_beyond_bit_depth_is_range_error() {
        let bytes = raw16_file(1, 1, 12, &[5000]);
        match decode_depth(&bytes, DepthFormat::Raw16) {
            Err(Error::Range { value: 5000, bits: 12 }) => {}
            other => panic!("expected range error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_headers_are_format_errors() {
        let mut bytes = raw16_file(2, 2, 16, &[1, 2, 3, 4]);
        bytes[0] = b'X';
        assert!(matches!(decode_depth(&bytes, DepthFormat::Raw16), Err(Error::Format(_))));
        let bytes = raw16_file(2, 2, 16, &[1, 2, 3]);
        assert!(matches!(decode_depth(&bytes, DepthFormat::Raw16), Err(Error::Format(_))));
        assert!(matches!(decode_depth(b"P5\n2 2\n", DepthFormat::Pgm16), Err(Error::Format(_))));
        let bytes = raw16_file(1, 1, 16, &[1]);
        assert!(matches!(decode_depth(&bytes, DepthFormat::Raw32), Err(Error::Format(_))));
    }

    #[test]
    fn pgm16_big_endian_samples() {
        let mut bytes = b"P5\n# depth\n2 2\n65535\n".to_vec();
        for v in [1u16, 2, 3, 4] {
            bytes.extend_from_slice(&v.to_be_bytes());
        }
        let map = decode_depth(&bytes, DepthFormat::Pgm16).unwrap();
        assert_eq!(map.data(), &[1, 2, 3, 4]);
        assert!(map.mask().iter().all(|&m| m));
        assert_eq!(map.bit_depth(), 16);
    }

    #[test]
    fn quantize_rounds_half_away() {
        assert_eq!(quantize(1.2345, 1000, 16).unwrap(), 1235);
        assert_eq!(quantize(0.5999, 1000, 16).unwrap(), 600);
        assert_eq!(quantize(350.0, 1000, 19).unwrap(), 350_000);
        assert!(matches!(quantize(350.0, 1000, 18), Err(Error::Range { .. })));
        assert!(quantize(-1.0, 1000, 16).is_err());
    }

    #[test]
    fn projection_of_forward_point() {
        let cfg = ProjectionConfig::default();
        let map = project_pointcloud(&[[10.0, 0.0, 0.0]], &cfg, 1000, 16).unwrap();
        assert_eq!(map.get(4, 1024), 10_000);
        assert_eq!(map.valid_count(), 1);
    }

    #[test]
    fn projection_nearer_point_wins() {
        let cfg = ProjectionConfig::default();
        let map =
            project_pointcloud(&[[5.0, 0.0, 0.0], [3.0, 0.0, 0.0]], &cfg, 1000, 16).unwrap();
        let (row, col) = cfg.cell(3.0, 0.0, 0.0).unwrap();
        assert_eq!(map.get(row, col), 3000);
        assert_eq!(map.valid_count(), 1);
    }

    #[test]
    fn projection_clamps_high_elevation() {
        let cfg = ProjectionConfig::default();
        let map = project_pointcloud(&[[1.0, 0.0, 5.0]], &cfg, 1000, 16).unwrap();
        let (row, _) = cfg.cell(1.0, 0.0, 5.0).unwrap();
        assert_eq!(row, 0);
        assert_eq!(map.valid_count(), 1);
        let empty = project_pointcloud(&[], &cfg, 1000, 16).unwrap();
        assert_eq!(empty.valid_count(), 0);
    }

    #[test]
    fn pointcloud_records() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(decode_pointcloud(&bytes).unwrap(), vec![[1.0, 2.0, 3.0]]);
        assert!(decode_pointcloud(&bytes[..15]).is_err());
    }

    fn map_3x3(values: [u32; 9]) -> DepthMap {
        DepthMap::new(3, 3, 16, 1000, values.to_vec()).unwrap()
    }

    #[test]
    fn median_fill_odd_and_even_counts() {
        let filled = median_fill(&map_3x3([4, 0, 6, 0, 0, 0, 8, 0, 0]), 3).unwrap();
        assert_eq!(filled.get(1, 1), 6);
        let filled = median_fill(&map_3x3([5, 0, 0, 0, 0, 0, 0, 0, 7]), 3).unwrap();
        assert_eq!(filled.get(1, 1), 5);
        assert!(filled.is_valid(1, 1));
    }

    #[test]
    fn median_fill_isolated_hole_stays_invalid() {
        let map = DepthMap::new(5, 1, 16, 1000, vec![9, 0, 0, 0, 0]).unwrap();
        let filled = median_fill(&map, 3).unwrap();
        assert_eq!(filled.data(), &[9, 9, 0, 0, 0]);
        assert!(!filled.is_valid(0, 2));
        assert!(median_fill(&map, 4).is_err());
        assert!(median_fill(&map, 1).is_err());
    }

    #[test]
    fn median_fill_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let values: Vec<u32> = (0..64)
            .map(|_| if rng.gen_bool(0.4) { 0 } else { rng.gen_range(1..1000) })
            .collect();
        let map = DepthMap::new(8, 8, 16, 1000, values).unwrap();
        let filled = median_fill(&map, 5).unwrap();
        for row in 0..8 {
            for col in 0..8 {
                if map.is_valid(row, col) {
                    assert_eq!(filled.get(row, col), map.get(row, col));
                    continue;
                }
                let mut nb = Vec::new();
                for r in row.saturating_sub(2)..(row + 3).min(8) {
                    for c in col.saturating_sub(2)..(col + 3).min(8) {
                        if map.is_valid(r, c) {
                            nb.push(map.get(r, c));
                        }
                    }
                }
                nb.sort();
                let expected = if nb.is_empty() { 0 } else { nb[(nb.len() - 1) / 2] };
                assert_eq!(filled.get(row, col), expected);
            }
        }
    }

    #[test]
    fn synthetic_maps_respect_bit_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for bits in [12u8, 16, 18] {
            let map = synthetic_map(64, 32, bits, &mut rng);
            assert!(map.data().iter().all(|&v| v <= map.max_value()));
            assert!(map.valid_count() > 0);
        }
    }

    fn arb_map() -> impl Strategy<Value = DepthMap> {
        (1usize..12, 1usize..12, 8u8..=24, any::<u64>()).prop_map(|(w, h, bits, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let max = (1u64 << bits) as u32;
            let data = (0..w * h)
                .map(|_| if rng.gen_bool(0.2) { 0 } else { rng.gen_range(0..max) })
                .collect();
            DepthMap::new(w, h, bits, 1000, data).unwrap()
        })
    }

    proptest! {
        #[test]
        fn file_round_trip(map in arb_map()) {
            let raw32 = decode_depth(&encode_depth(&map, DepthFormat::Raw32).unwrap(), DepthFormat::Raw32).unwrap();
            prop_assert_eq!(&raw32, &map);
            if map.bit_depth() <= 16 {
                let raw16 = decode_depth(&encode_depth(&map, DepthFormat::Raw16).unwrap(), DepthFormat::Raw16).unwrap();
                prop_assert_eq!(&raw16, &map);
                let pgm = decode_depth(&encode_depth(&map, DepthFormat::Pgm16).unwrap(), DepthFormat::Pgm16).unwrap();
                prop_assert_eq!(&pgm, &map);
            }
        }

        #[test]
        fn median_fill_idempotent_without_holes(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..49).map(|_| rng.gen_range(1..4096)).collect();
            let map = DepthMap::new(7, 7, 12, 1000, data).unwrap();
            prop_assert_eq!(median_fill(&map, 3).unwrap(), map);
        }

        #[test]
        fn projection_values_in_range(pts in prop::collection::vec((-60f32..60.0, -60f32..60.0, -10f32..10.0), 0..200)) {
            let points: Vec<[f32; 3]> = pts.into_iter().map(|(x, y, z)| [x, y, z]).collect();
            let cfg = ProjectionConfig { rows: 16, cols: 64, ..ProjectionConfig::default() };
            let map = project_pointcloud(&points, &cfg, 1000, 18).unwrap();
            for (&v, &m) in map.data().iter().zip(map.mask()) {
                prop_assert!(v <= map.max_value());
                prop_assert_eq!(m, v != 0);
            }
        }
    }
}

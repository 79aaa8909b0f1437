//! File formats: PFM rasters, 16-bit PNG depth, sparse point lists, cost-volume
//! blobs and key=value config files.
//!
//! Parsers report the byte offset of the first offending byte where that is
//! well defined. Writers are deterministic: the same inputs produce the same
//! bytes, which the CLI's rerun guarantee builds on.

use std::path::Path;

use crate::field::{DenseField, IntensityImage, Representation, SparsePoint, SparseSignalMap};
use crate::{Error, Result};

/// Raster container formats for dense fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RasterFormat {
    /// Portable float map, little-endian, lossless for f32 data. Invalid pixels
    /// are stored as NaN.
    Pfm,
    /// 16-bit grayscale PNG storing round(value * 256); 0 marks invalid pixels.
    Png16,
}

/// Fixed scale of the 16-bit integer depth encoding.
pub const PNG16_SCALE: f64 = 256.0;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

// ---------------------------------------------------------------------------
// PFM

struct PfmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> PfmCursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(&self.path, msg, Some(self.pos as u64))
    }

    /// Next whitespace-delimited ASCII token.
    fn token(&mut self) -> Result<&'a str> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(&self.path, "unexpected end of header", Some(start as u64)));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::format(&self.path, "non-ascii header", Some(start as u64)))
    }
}

fn parse_pfm(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut cur = PfmCursor { bytes, pos: 0, path: path_str(path) };
    let magic = cur.token()?;
    let channels = match magic {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(cur.err(format!("bad magic {other:?}, expected Pf or PF"))),
    };
    let width: usize = cur.token()?.parse().map_err(|_| cur.err("bad width"))?;
    let height: usize = cur.token()?.parse().map_err(|_| cur.err("bad height"))?;
    let scale: f64 = cur.token()?.parse().map_err(|_| cur.err("bad scale"))?;
    if scale >= 0.0 {
        return Err(cur.err(format!("scale {scale} is not negative; only little-endian data is supported")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("missing separator before payload"));
    }
    cur.pos += 1;
    let count = width * height * channels;
    let need = count * 4;
    if bytes.len() - cur.pos < need {
        return Err(Error::format(
            &cur.path,
            format!("truncated payload: need {need} bytes, have {}", bytes.len() - cur.pos),
            Some(bytes.len() as u64),
        ));
    }
    if bytes.len() - cur.pos > need {
        return Err(Error::format(
            &cur.path,
            format!("trailing bytes after payload"),
            Some((cur.pos + need) as u64),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for k in 0..count {
        let off = cur.pos + k * 4;
        values.push(f32::from_le_bytes([
            bytes[off],
            bytes[off + 1],
            bytes[off + 2],
            bytes[off + 3],
        ]));
    }
    Ok((width, height, channels, values))
}

/// Byte offset of sample (file_row, col, channel) in a PFM payload; used to
/// point error messages at the offending value.
fn pfm_value_offset(header_len: usize, width: usize, channels: usize, file_row: usize, col: usize, c: usize) -> u64 {
    (header_len + ((file_row * width + col) * channels + c) * 4) as u64
}

fn pfm_header(channels: usize, width: usize, height: usize) -> Vec<u8> {
    let magic = if channels == 3 { "PF" } else { "Pf" };
    format!("{magic}\n{width} {height}\n-1\n").into_bytes()
}

fn range_check(repr: Representation, v: f64) -> std::result::Result<(), String> {
    match repr {
        Representation::DepthMeters if v < 0.0 => Err(format!("negative depth {v}")),
        Representation::DisparityPixels if v < 0.0 => Err(format!("negative disparity {v}")),
        Representation::Unitless if !(0.0..=1.0).contains(&v) => {
            Err(format!("unitless value {v} outside [0, 1]"))
        }
        _ => Ok(()),
    }
}

/// Reads a dense field from a single-channel PFM, interpreting NaN as invalid.
pub fn read_field_pfm(path: &Path, repr: Representation) -> Result<DenseField> {
    let bytes = std::fs::read(path)?;
    let (width, height, channels, raw) = parse_pfm(path, &bytes)?;
    if channels != 1 {
        return Err(Error::format(path_str(path), "expected single-channel Pf for a dense field", Some(0)));
    }
    let header_len = bytes.len() - raw.len() * 4;
    let mut field = DenseField::empty(height, width, repr);
    for file_row in 0..height {
        // PFM stores rows bottom to top.
        let i = height - 1 - file_row;
        for j in 0..width {
            let v = raw[file_row * width + j];
            if v.is_nan() {
                continue;
            }
            let offset = pfm_value_offset(header_len, width, 1, file_row, j, 0);
            if v.is_infinite() {
                return Err(Error::format(path_str(path), format!("non-finite value {v}"), Some(offset)));
            }
            let v = v as f64;
            range_check(repr, v)
                .map_err(|e| Error::format(path_str(path), format!("out of range: {e}"), Some(offset)))?;
            field
                .set(i, j, v)
                .map_err(|e| Error::format(path_str(path), e.to_string(), Some(offset)))?;
        }
    }
    Ok(field)
}

/// Writes a dense field as single-channel PFM; invalid pixels become NaN.
pub fn write_field_pfm(field: &DenseField, path: &Path) -> Result<()> {
    let mut out = pfm_header(1, field.width(), field.height());
    for file_row in 0..field.height() {
        let i = field.height() - 1 - file_row;
        for j in 0..field.width() {
            let v = match field.get(i, j) {
                Some(v) => {
                    if v.abs() > f32::MAX as f64 {
                        return Err(Error::config(format!(
                            "pixel ({i}, {j}) value {v} exceeds the 32-bit float range of the format"
                        )));
                    }
                    v as f32
                }
                None => f32::NAN,
            };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a grayscale (Pf) or color (PF) PFM as an intensity image.
pub fn read_image_pfm(path: &Path) -> Result<IntensityImage> {
    let bytes = std::fs::read(path)?;
    let (width, height, channels, raw) = parse_pfm(path, &bytes)?;
    let header_len = bytes.len() - raw.len() * 4;
    let mut values = vec![0.0f64; width * height * channels];
    for file_row in 0..height {
        let i = height - 1 - file_row;
        for j in 0..width {
            for c in 0..channels {
                let v = raw[(file_row * width + j) * channels + c];
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    let offset = pfm_value_offset(header_len, width, channels, file_row, j, c);
                    return Err(Error::format(
                        path_str(path),
                        format!("out of range: intensity {v} outside [0, 1]"),
                        Some(offset),
                    ));
                }
                values[(i * width + j) * channels + c] = v as f64;
            }
        }
    }
    IntensityImage::new(height, width, channels, values)
}

/// Writes an intensity image as PFM (PF when 3-channel, Pf when grayscale).
pub fn write_image_pfm(image: &IntensityImage, path: &Path) -> Result<()> {
    let mut out = pfm_header(image.channels(), image.width(), image.height());
    for file_row in 0..image.height() {
        let i = image.height() - 1 - file_row;
        for j in 0..image.width() {
            for c in 0..image.channels() {
                out.extend_from_slice(&(image.channel(i, j, c) as f32).to_le_bytes());
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// 16-bit PNG

/// Writes depth or disparity as 16-bit grayscale PNG, value = round(v * 256).
///
/// 0 is reserved for invalid pixels, so values must round into 1..=65535;
/// confidence maps are rejected outright.
pub fn write_field_png16(field: &DenseField, path: &Path) -> Result<()> {
    if field.representation() == Representation::Unitless {
        return Err(Error::Representation {
            expected: "depth-meters or disparity-pixels".to_string(),
            found: field.representation().name().to_string(),
        });
    }
    let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
        field.width() as u32,
        field.height() as u32,
    );
    for i in 0..field.height() {
        for j in 0..field.width() {
            let encoded = match field.get(i, j) {
                None => 0u16,
                Some(v) => {
                    let q = (v * PNG16_SCALE).round();
                    if q < 1.0 || q > 65535.0 {
                        return Err(Error::config(format!(
                            "pixel ({i}, {j}) value {v} exceeds the 16-bit format range"
                        )));
                    }
                    q as u16
                }
            };
            buf.put_pixel(j as u32, i as u32, image::Luma([encoded]));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::format(path_str(path), e.to_string(), None))?;
    Ok(())
}

/// Reads a 16-bit grayscale PNG written by [`write_field_png16`].
pub fn read_field_png16(path: &Path, repr: Representation) -> Result<DenseField> {
    if repr == Representation::Unitless {
        return Err(Error::Representation {
            expected: "depth-meters or disparity-pixels".to_string(),
            found: repr.name().to_string(),
        });
    }
    let img = image::open(path).map_err(|e| Error::format(path_str(path), e.to_string(), None))?;
    let buf = match img {
        image::DynamicImage::ImageLuma16(buf) => buf,
        other => {
            return Err(Error::format(
                path_str(path),
                format!("expected 16-bit grayscale PNG, found {:?}", other.color()),
                None,
            ))
        }
    };
    let (width, height) = (buf.width() as usize, buf.height() as usize);
    let mut field = DenseField::empty(height, width, repr);
    for i in 0..height {
        for j in 0..width {
            let raw = buf.get_pixel(j as u32, i as u32)[0];
            if raw != 0 {
                field.set(i, j, raw as f64 / PNG16_SCALE)?;
            }
        }
    }
    Ok(field)
}

/// Dispatches on the container format.
pub fn write_raster(field: &DenseField, path: &Path, format: RasterFormat) -> Result<()> {
    match format {
        RasterFormat::Pfm => write_field_pfm(field, path),
        RasterFormat::Png16 => write_field_png16(field, path),
    }
}

/// Dispatches on the container format; `repr` declares what the scalars mean
/// since neither container stores that.
pub fn read_raster(path: &Path, format: RasterFormat, repr: Representation) -> Result<DenseField> {
    match format {
        RasterFormat::Pfm => read_field_pfm(path, repr),
        RasterFormat::Png16 => read_field_png16(path, repr),
    }
}

// ---------------------------------------------------------------------------
// Sparse point lists

fn repr_token(repr: Representation) -> Result<&'static str> {
    match repr {
        Representation::DepthMeters => Ok("depth"),
        Representation::DisparityPixels => Ok("disparity"),
        Representation::Unitless => Err(Error::config("sparse point files carry depth or disparity")),
    }
}

/// Writes `# rows=H cols=W repr=...` followed by one `i,j,value` line per point.
pub fn write_sparse_points(map: &SparseSignalMap, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "# rows={} cols={} repr={}\n",
        map.height(),
        map.width(),
        repr_token(map.representation())?
    ));
    for p in map.points() {
        out.push_str(&format!("{},{},{}\n", p.row, p.col, p.value));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a sparse point list written by [`write_sparse_points`].
pub fn read_sparse_points(path: &Path) -> Result<SparseSignalMap> {
    let text = std::fs::read_to_string(path)?;
    let p = path_str(path);
    let mut offset = 0u64;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(&p, "empty file", Some(0)))?;
    let mut rows = None;
    let mut cols = None;
    let mut repr = None;
    let body = header
        .strip_prefix('#')
        .ok_or_else(|| Error::format(&p, "missing `# rows=.. cols=.. repr=..` header", Some(0)))?;
    for part in body.split_whitespace() {
        match part.split_once('=') {
            Some(("rows", v)) => rows = v.parse::<usize>().ok(),
            Some(("cols", v)) => cols = v.parse::<usize>().ok(),
            Some(("repr", "depth")) => repr = Some(Representation::DepthMeters),
            Some(("repr", "disparity")) => repr = Some(Representation::DisparityPixels),
            _ => return Err(Error::format(&p, format!("bad header field {part:?}"), Some(0))),
        }
    }
    let (height, width, repr) = match (rows, cols, repr) {
        (Some(r), Some(c), Some(rep)) => (r, c, rep),
        _ => return Err(Error::format(&p, "header must set rows, cols and repr", Some(0))),
    };
    offset += header.len() as u64 + 1;
    let mut points = Vec::new();
    for line in lines {
        let line_start = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let parse = |part: Option<&str>, what: &str| -> Result<f64> {
            part.and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::format(&p, format!("bad {what} in line {line:?}"), Some(line_start)))
        };
        let row = parse(parts.next(), "row")?;
        let col = parse(parts.next(), "col")?;
        let value = parse(parts.next(), "value")?;
        if parts.next().is_some() {
            return Err(Error::format(&p, format!("too many fields in line {line:?}"), Some(line_start)));
        }
        if row < 0.0 || col < 0.0 || row.fract() != 0.0 || col.fract() != 0.0 {
            return Err(Error::format(&p, format!("non-integer pixel in line {line:?}"), Some(line_start)));
        }
        points.push(SparsePoint { row: row as usize, col: col as usize, value });
    }
    SparseSignalMap::new(height, width, repr, points)
        .map_err(|e| Error::format(&p, e.to_string(), None))
}

// ---------------------------------------------------------------------------
// Cost volume blobs

/// Writes a cost volume as a 16-byte header (height, width, d_max, features as
/// little-endian u32) followed by f32 samples in (i, j, d, c) order.
pub fn write_cost_volume(volume: &crate::field::CostVolume, path: &Path) -> Result<()> {
    let mut out = Vec::with_capacity(16 + volume.raw().len() * 4);
    for dim in [volume.height(), volume.width(), volume.d_max(), volume.features()] {
        out.extend_from_slice(&u32::try_from(dim).map_err(|_| Error::config("dimension exceeds u32"))?.to_le_bytes());
    }
    for &v in volume.raw() {
        if v.abs() > f32::MAX as f64 {
            return Err(Error::config(format!("cost volume value {v} exceeds the 32-bit float range")));
        }
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a cost volume written by [`write_cost_volume`].
pub fn read_cost_volume(path: &Path) -> Result<crate::field::CostVolume> {
    let bytes = std::fs::read(path)?;
    let p = path_str(path);
    if bytes.len() < 16 {
        return Err(Error::format(&p, "truncated header", Some(bytes.len() as u64)));
    }
    let dim = |k: usize| u32::from_le_bytes([bytes[4 * k], bytes[4 * k + 1], bytes[4 * k + 2], bytes[4 * k + 3]]) as usize;
    let (height, width, d_max, features) = (dim(0), dim(1), dim(2), dim(3));
    let count = height * width * d_max * features;
    if bytes.len() != 16 + count * 4 {
        return Err(Error::format(
            &p,
            format!("payload has {} bytes, expected {}", bytes.len() - 16, count * 4),
            Some(bytes.len().min(16 + count * 4) as u64),
        ));
    }
    let mut values = Vec::with_capacity(count);
    for k in 0..count {
        let off = 16 + k * 4;
        let v = f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        if !v.is_finite() {
            return Err(Error::format(&p, format!("non-finite value {v}"), Some(off as u64)));
        }
        values.push(v as f64);
    }
    crate::field::CostVolume::new(height, width, d_max, features, values)
        .map_err(|e| Error::format(&p, e.to_string(), None))
}

// ---------------------------------------------------------------------------
// key=value files

/// Reads a `key=value` file, skipping blank lines and `#` comments. Order is
/// preserved; duplicate keys are an error.
pub fn read_kv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let p = path_str(path);
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&p, format!("line {}: expected key=value, got {line:?}", lineno + 1), None))?;
        let key = key.trim().to_string();
        if pairs.iter().any(|(k, _)| *k == key) {
            return Err(Error::format(&p, format!("duplicate key {key:?}"), None));
        }
        pairs.push((key, value.trim().to_string()));
    }
    Ok(pairs)
}

/// Writes pairs as `key=value` lines in the given order.
pub fn write_kv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in pairs {
        out.push_str(&format!("{k}={v}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes a simple CSV with one header line; fields are written verbatim.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

//! Dataset ingestion and result persistence.
//!
//! * IDX3/IDX1 (the MNIST container): big-endian magic and counts, one
//!   unsigned byte per pixel or label.
//! * Field files: raw row-major little-endian `f32` payload plus a
//!   `key = value` text sidecar at `<payload>.hdr`.
//! * Binary PGM (P5) previews, 8 bit, min-max scaled.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::grid::{ImageGrid, ImageStack};

pub const IDX3_MAGIC: u32 = 0x0000_0803;
pub const IDX1_MAGIC: u32 = 0x0000_0801;

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated header: missing {what}")))
}

/// Decodes an IDX3 image container; intensities are scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8], count_limit: Option<usize>) -> Result<Vec<ImageGrid>> {
    let magic = read_be_u32(bytes, 0, "magic")?;
    if magic != IDX3_MAGIC {
        return format_err(format!("expected IDX3 magic 0x{IDX3_MAGIC:08x}, found 0x{magic:08x}"));
    }
    let n = read_be_u32(bytes, 4, "image count")? as usize;
    let rows = read_be_u32(bytes, 8, "row count")? as usize;
    let cols = read_be_u32(bytes, 12, "column count")? as usize;
    let px = rows * cols;
    let expected = 16 + n * px;
    if bytes.len() < expected {
        return format_err(format!("truncated payload: need {expected} bytes, have {}", bytes.len()));
    }
    if px == 0 {
        return format_err("zero-sized images");
    }
    let take = count_limit.map_or(n, |l| l.min(n));
    bytes[16..16 + take * px]
        .chunks_exact(px)
        .map(|chunk| ImageGrid::new(vec![rows, cols], chunk.iter().map(|&b| b as f64 / 255.0).collect()))
        .collect()
}

/// Loads at most `count_limit` images (all when `None`) in file order.
pub fn load_idx_images(path: &Path, count_limit: Option<usize>) -> Result<ImageStack> {
    let bytes = fs::read(path)?;
    let images = parse_idx_images(&bytes, count_limit)?;
    if images.is_empty() {
        return invalid(format!("no images selected from {}", path.display()));
    }
    ImageStack::new(images)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(bytes, 0, "magic")?;
    if magic != IDX1_MAGIC {
        return format_err(format!("expected IDX1 magic 0x{IDX1_MAGIC:08x}, found 0x{magic:08x}"));
    }
    let n = read_be_u32(bytes, 4, "label count")? as usize;
    let payload = &bytes[8..];
    if payload.len() < n {
        return format_err(format!("truncated labels: need {n}, have {}", payload.len()));
    }
    Ok(payload[..n].to_vec())
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    parse_idx_labels(&fs::read(path)?)
}

/// The first `limit` images whose label equals `digit`, in file order.
pub fn load_idx_digit(images: &Path, labels: &Path, digit: u8, limit: usize) -> Result<ImageStack> {
    let labels = load_idx_labels(labels)?;
    let all = parse_idx_images(&fs::read(images)?, None)?;
    if all.len() != labels.len() {
        return format_err(format!("{} images but {} labels", all.len(), labels.len()));
    }
    let picked: Vec<ImageGrid> = all
        .into_iter()
        .zip(labels)
        .filter(|(_, l)| *l == digit)
        .map(|(im, _)| im)
        .take(limit)
        .collect();
    if picked.is_empty() {
        return invalid(format!("no images with label {digit}"));
    }
    ImageStack::new(picked)
}

/// Encodes 2D images as IDX3, quantizing `[0, 1]` to bytes.
pub fn encode_idx_images(images: &[ImageGrid]) -> Result<Vec<u8>> {
    let (rows, cols) = match images.first().map(|im| im.shape()) {
        Some([r, c]) => (*r, *c),
        Some(s) => return invalid(format!("IDX3 holds 2D images, got shape {s:?}")),
        None => (0, 0),
    };
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    out.extend_from_slice(&IDX3_MAGIC.to_be_bytes());
    for v in [images.len(), rows, cols] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    for im in images {
        if im.shape() != [rows, cols] {
            return invalid("IDX3 images must share one shape");
        }
        out.extend(im.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX1_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Semantic tag stored in a field file header.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldLabel {
    Template,
    SigmaStar,
    Image,
}

impl fmt::Display for FieldLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FieldLabel::Template => "template",
            FieldLabel::SigmaStar => "sigma_star",
            FieldLabel::Image => "image",
        })
    }
}

impl FromStr for FieldLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "template" => Ok(Self::Template),
            "sigma_star" => Ok(Self::SigmaStar),
            "image" => Ok(Self::Image),
            other => format_err(format!("unknown field label '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldFile {
    pub label: FieldLabel,
    pub grid: ImageGrid,
}

/// Sidecar header path for a field payload.
pub fn header_path(payload: &Path) -> PathBuf {
    let mut s = payload.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

fn render_header(grid: &ImageGrid, label: FieldLabel) -> String {
    let shape: Vec<String> = grid.shape().iter().map(|n| n.to_string()).collect();
    format!(
        "format = fieldfile\nversion = 1\nlabel = {label}\ndim = {}\nshape = {}\nencoding = f32\nendianness = little\n",
        grid.dim(),
        shape.join(" ")
    )
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Format(format!("expected 'key = value', got '{l}'")))
        })
        .collect()
}

fn header_value<'a>(kv: &'a [(String, String)], key: &str) -> Result<&'a str> {
    kv.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::Format(format!("header is missing '{key}'")))
}

/// Writes the payload to `path` and the header to `<path>.hdr`.
pub fn save_field(path: &Path, grid: &ImageGrid, label: FieldLabel) -> Result<()> {
    let mut payload = Vec::with_capacity(grid.len() * 4);
    for &v in grid.data() {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, payload)?;
    fs::write(header_path(path), render_header(grid, label))?;
    Ok(())
}

pub fn load_field(path: &Path) -> Result<FieldFile> {
    let header = fs::read_to_string(header_path(path))?;
    let kv = parse_key_values(&header)?;
    if header_value(&kv, "format")? != "fieldfile" {
        return format_err("not a field file header");
    }
    if header_value(&kv, "encoding")? != "f32" || header_value(&kv, "endianness")? != "little" {
        return format_err("unsupported value encoding");
    }
    let label: FieldLabel = header_value(&kv, "label")?.parse()?;
    let shape: Vec<usize> = header_value(&kv, "shape")?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| Error::Format(format!("bad shape entry '{s}'"))))
        .collect::<Result<_>>()?;
    let dim: usize = header_value(&kv, "dim")?
        .parse()
        .map_err(|_| Error::Format("bad dim".into()))?;
    if dim != shape.len() || shape.is_empty() || shape.contains(&0) {
        return format_err(format!("inconsistent shape {shape:?} for dim {dim}"));
    }
    let payload = fs::read(path)?;
    let expected = shape.iter().product::<usize>() * 4;
    if payload.len() != expected {
        return format_err(format!("payload has {} bytes, header implies {expected}", payload.len()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let grid = ImageGrid::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
    Ok(FieldFile { label, grid })
}

/// Binary PGM bytes for a 1D (one row) or 2D image.
pub fn encode_pgm(image: &ImageGrid) -> Result<Vec<u8>> {
    let (rows, cols) = match image.shape() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        s => return invalid(format!("PGM needs a 1D or 2D image, got shape {s:?}")),
    };
    let (lo, hi) = image.min_max();
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| {
        if hi > lo {
            (255.0 * (v - lo) / (hi - lo)).round() as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn save_pgm(image: &ImageGrid, path: &Path) -> Result<()> {
    fs::write(path, encode_pgm(image)?)?;
    Ok(())
}

/// Parses a binary PGM into `(rows, cols, bytes)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return format_err("truncated PGM header");
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return format_err(format!("expected P5, found {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM number '{s}'")));
    let (cols, rows, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return format_err("only 8-bit PGM is supported");
    }
    let data = bytes.get(pos + 1..pos + 1 + rows * cols).ok_or_else(|| Error::Format("truncated PGM payload".into()))?;
    Ok((rows, cols, data.to_vec()))
}

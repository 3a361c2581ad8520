//! Bar overlays and heatmaps for `sigma*` fields.
//!
//! Each bar is centred on a pixel, points along the template gradient and
//! is `2 sigma*` pixels long. 3D volumes are shown one axis-aligned slice at
//! a time, with gradients projected onto the slice plane.

use std::fmt::Write as _;

use base64::Engine as _;

use crate::error::{invalid, Error, Result};
use crate::grid::ImageGrid;
use crate::smoothing::gaussian_derivative;

/// Viridis sampled at ten evenly spaced anchors; colors in between are
/// linearly interpolated in sRGB.
pub const VIRIDIS_ANCHORS: [[u8; 3]; 10] = [
    [0x44, 0x01, 0x54],
    [0x48, 0x28, 0x78],
    [0x3e, 0x4a, 0x89],
    [0x31, 0x68, 0x8e],
    [0x26, 0x82, 0x8e],
    [0x1f, 0x9e, 0x89],
    [0x35, 0xb7, 0x79],
    [0x6d, 0xcd, 0x59],
    [0xb4, 0xde, 0x2c],
    [0xfd, 0xe7, 0x25],
];

/// Color for `t` in `[0, 1]` (clamped).
pub fn colormap(t: f64) -> [u8; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let pos = t * (VIRIDIS_ANCHORS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(VIRIDIS_ANCHORS.len() - 2);
    let f = pos - i as f64;
    let (a, b) = (VIRIDIS_ANCHORS[i], VIRIDIS_ANCHORS[i + 1]);
    let mut out = [0u8; 3];
    for k in 0..3 {
        out[k] = (a[k] as f64 + f * (b[k] as f64 - a[k] as f64)).round() as u8;
    }
    out
}

/// An axis-aligned plane of a 3D volume: all voxels with `idx[axis] == index`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SliceSpec {
    pub axis: usize,
    pub index: usize,
}

impl SliceSpec {
    /// The two in-plane axes, in increasing order.
    pub fn plane_axes(&self) -> [usize; 2] {
        match self.axis {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }
}

impl std::str::FromStr for SliceSpec {
    type Err = Error;

    /// Parses `axis:index`.
    fn from_str(s: &str) -> Result<Self> {
        let (a, i) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidInput(format!("slice must be axis:index, got '{s}'")))?;
        let axis = a.trim().parse().map_err(|_| Error::InvalidInput(format!("bad slice axis '{a}'")))?;
        let index = i.trim().parse().map_err(|_| Error::InvalidInput(format!("bad slice index '{i}'")))?;
        if axis > 2 {
            return invalid(format!("slice axis must be 0, 1 or 2, got {axis}"));
        }
        Ok(Self { axis, index })
    }
}

fn check_slice(dim: usize, shape: &[usize], slice: Option<SliceSpec>) -> Result<()> {
    match (dim, slice) {
        (3, None) => invalid("a slice is required for 3D fields"),
        (3, Some(s)) if s.index >= shape[s.axis] => {
            invalid(format!("slice index {} out of range for axis of length {}", s.index, shape[s.axis]))
        }
        (d, Some(_)) if d < 3 => invalid("slices apply only to 3D fields"),
        _ => Ok(()),
    }
}

/// Rows and columns of the displayed plane. 1D fields are shown as one row.
fn plane_shape(shape: &[usize], slice: Option<SliceSpec>) -> [usize; 2] {
    match (shape.len(), slice) {
        (1, _) => [1, shape[0]],
        (2, _) => [shape[0], shape[1]],
        (_, Some(s)) => {
            let [a, b] = s.plane_axes();
            [shape[a], shape[b]]
        }
        _ => unreachable!("validated by check_slice"),
    }
}

/// Full index of plane pixel `(r, c)`.
fn volume_index(dim: usize, slice: Option<SliceSpec>, r: usize, c: usize) -> Vec<usize> {
    match (dim, slice) {
        (1, _) => vec![c],
        (2, _) => vec![r, c],
        (_, Some(s)) => {
            let [a, b] = s.plane_axes();
            let mut idx = vec![0; 3];
            idx[s.axis] = s.index;
            idx[a] = r;
            idx[b] = c;
            idx
        }
        _ => unreachable!("validated by check_slice"),
    }
}

/// The displayed plane of `field` as a 2D grid.
pub fn slice_plane(field: &ImageGrid, slice: Option<SliceSpec>) -> Result<ImageGrid> {
    check_slice(field.dim(), field.shape(), slice)?;
    let [rows, cols] = plane_shape(field.shape(), slice);
    ImageGrid::from_fn(&[rows, cols], |i| field.get(&volume_index(field.dim(), slice, i[0], i[1])))
}

/// Gradient components along each axis via Gaussian derivative filters.
pub fn template_gradient(template: &ImageGrid, sigma_g: f64) -> Result<Vec<ImageGrid>> {
    (0..template.dim())
        .map(|axis| gaussian_derivative(template, sigma_g, axis))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bar {
    /// `(row, col)` in the displayed plane, pixel units.
    pub center: [f64; 2],
    /// Unit vector `(d_row, d_col)`.
    pub direction: [f64; 2],
    pub half_length: f64,
    /// Value used for coloring (`sigma*`).
    pub value: f64,
}

impl Bar {
    pub fn endpoints(&self) -> ([f64; 2], [f64; 2]) {
        let [r, c] = self.center;
        let [dr, dc] = self.direction;
        let h = self.half_length;
        ([r - h * dr, c - h * dc], [r + h * dr, c + h * dc])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BarOverlay {
    pub bars: Vec<Bar>,
    pub slice: Option<SliceSpec>,
    /// Rows and columns of the displayed plane.
    pub plane_shape: [usize; 2],
}

/// Overlay parameters; `None` picks the documented default.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OverlayOptions {
    /// Gradient bandwidth, default 1 px.
    pub sigma_g: f64,
    /// Minimum gradient norm, default `1e-3` times the template intensity range.
    pub eps_grad: Option<f64>,
    /// Draw every `stride`-th pixel per axis, default 2 (3 for 3D slices).
    pub stride: Option<usize>,
    pub slice: Option<SliceSpec>,
}

impl Default for OverlayOptions {
    fn default() -> Self {
        Self {
            sigma_g: 1.0,
            eps_grad: None,
            stride: None,
            slice: None,
        }
    }
}

/// Bars from precomputed gradient components.
pub fn overlay_from_gradient(
    gradient: &[ImageGrid],
    sigma_star: &ImageGrid,
    eps_grad: f64,
    stride: usize,
    slice: Option<SliceSpec>,
) -> Result<BarOverlay> {
    let dim = sigma_star.dim();
    if gradient.len() != dim || gradient.iter().any(|g| g.shape() != sigma_star.shape()) {
        return invalid("gradient components must match the sigma* field");
    }
    if stride == 0 {
        return invalid("stride must be >= 1");
    }
    if !(eps_grad >= 0.0) {
        return invalid(format!("eps_grad must be >= 0, got {eps_grad}"));
    }
    check_slice(dim, sigma_star.shape(), slice)?;
    let plane = plane_shape(sigma_star.shape(), slice);
    let in_plane: [Option<usize>; 2] = match (dim, slice) {
        (1, _) => [None, Some(0)],
        (2, _) => [Some(0), Some(1)],
        (_, Some(s)) => s.plane_axes().map(Some),
        _ => unreachable!(),
    };
    let mut bars = Vec::new();
    for r in (0..plane[0]).step_by(stride) {
        for c in (0..plane[1]).step_by(stride) {
            let idx = volume_index(dim, slice, r, c);
            let flat = sigma_star.flat_index(&idx);
            let s = sigma_star.data()[flat];
            if !(s > 0.0) {
                continue;
            }
            let g = in_plane.map(|a| a.map_or(0.0, |a| gradient[a].data()[flat]));
            let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
            if !(norm > 0.0) || norm < eps_grad {
                continue;
            }
            bars.push(Bar {
                center: [r as f64, c as f64],
                direction: [g[0] / norm, g[1] / norm],
                half_length: s,
                value: s,
            });
        }
    }
    Ok(BarOverlay {
        bars,
        slice,
        plane_shape: plane,
    })
}

pub fn build_overlay(template: &ImageGrid, sigma_star: &ImageGrid, opts: &OverlayOptions) -> Result<BarOverlay> {
    if template.shape() != sigma_star.shape() {
        return invalid(format!(
            "template shape {:?} differs from sigma* shape {:?}",
            template.shape(),
            sigma_star.shape()
        ));
    }
    check_slice(template.dim(), template.shape(), opts.slice)?;
    let eps = opts.eps_grad.unwrap_or_else(|| {
        let (lo, hi) = template.min_max();
        1e-3 * (hi - lo)
    });
    let stride = opts.stride.unwrap_or(if template.dim() == 3 { 3 } else { 2 });
    let gradient = template_gradient(template, opts.sigma_g)?;
    overlay_from_gradient(&gradient, sigma_star, eps, stride, opts.slice)
}

fn encode_png(width: usize, height: usize, color: png::ColorType, pixels: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        writer
            .write_image_data(pixels)
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(out)
}

fn unit_interval(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.0
    }
}

/// PNG (8-bit RGB) of the displayed plane, min-max mapped through [`colormap`].
pub fn render_heatmap(field: &ImageGrid, slice: Option<SliceSpec>) -> Result<Vec<u8>> {
    if field.is_empty() {
        return invalid("empty field");
    }
    let plane = slice_plane(field, slice)?;
    let (lo, hi) = plane.min_max();
    let pixels: Vec<u8> = plane
        .data()
        .iter()
        .flat_map(|&v| colormap(unit_interval(v, lo, hi)))
        .collect();
    encode_png(plane.shape()[1], plane.shape()[0], png::ColorType::Rgb, &pixels)
}

/// PNG (8-bit grayscale) of the displayed plane, min-max scaled.
pub fn render_grayscale(field: &ImageGrid, slice: Option<SliceSpec>) -> Result<Vec<u8>> {
    let plane = slice_plane(field, slice)?;
    let (lo, hi) = plane.min_max();
    let pixels: Vec<u8> = plane
        .data()
        .iter()
        .map(|&v| (255.0 * unit_interval(v, lo, hi)).round() as u8)
        .collect();
    encode_png(plane.shape()[1], plane.shape()[0], png::ColorType::Grayscale, &pixels)
}

fn hex(rgb: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", rgb[0], rgb[1], rgb[2])
}

/// SVG document: template raster in the background, one `<line>` per bar
/// in pixel coordinates (x = column, y = row), and a color legend on the
/// right. Bar colors span `colormap_range`, or the range of bar values.
pub fn render_overlay_svg(
    template: &ImageGrid,
    overlay: &BarOverlay,
    colormap_range: Option<(f64, f64)>,
) -> Result<String> {
    let background = render_grayscale(template, overlay.slice)?;
    let [rows, cols] = overlay.plane_shape;
    let (lo, hi) = colormap_range.unwrap_or_else(|| {
        overlay
            .bars
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), bar| (a.min(bar.value), b.max(bar.value)))
    });
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let legend_w = (cols as f64 * 0.25).max(6.0);
    let (w, h) = (cols as f64 + legend_w, rows as f64);
    let px_scale = 16.0;
    let b64 = base64::engine::general_purpose::STANDARD.encode(&background);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="-0.5 -0.5 {w} {h}">"#,
        w * px_scale,
        h * px_scale
    );
    let _ = writeln!(
        svg,
        r#"<image x="-0.5" y="-0.5" width="{cols}" height="{rows}" preserveAspectRatio="none" style="image-rendering:pixelated" href="data:image/png;base64,{b64}"/>"#
    );
    let _ = writeln!(svg, r#"<g id="bars" stroke-width="0.2" stroke-linecap="round">"#);
    for bar in &overlay.bars {
        let ([r0, c0], [r1, c1]) = bar.endpoints();
        let color = hex(colormap(unit_interval(bar.value, lo, hi)));
        let _ = writeln!(svg, r#"<line x1="{c0}" y1="{r0}" x2="{c1}" y2="{r1}" stroke="{color}"/>"#);
    }
    let _ = writeln!(svg, "</g>");

    // legend: vertical color bar, high values on top
    let x0 = cols as f64 + 0.15 * legend_w;
    let bw = 0.3 * legend_w;
    let steps = 32;
    let cell = h / steps as f64;
    let _ = writeln!(svg, r#"<g id="legend">"#);
    for k in 0..steps {
        let t = 1.0 - (k as f64 + 0.5) / steps as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{x0}" y="{}" width="{bw}" height="{}" fill="{}"/>"#,
            -0.5 + k as f64 * cell,
            cell,
            hex(colormap(t))
        );
    }
    let fs = (h / 16.0).max(0.8);
    let tx = x0 + bw + 0.1 * legend_w;
    let _ = writeln!(svg, r#"<text x="{tx}" y="{}" font-size="{fs}" font-family="sans-serif">{hi:.2}</text>"#, -0.5 + fs);
    let _ = writeln!(svg, r#"<text x="{tx}" y="{}" font-size="{fs}" font-family="sans-serif">{lo:.2}</text>"#, h - 0.5);
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(svg, "</svg>");
    Ok(svg)
}

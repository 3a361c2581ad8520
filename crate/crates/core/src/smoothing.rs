//! Separable Gaussian and Gaussian-derivative filtering with zero extension.
//!
//! Kernels are sampled at integer offsets in `[-r, r]`, `r = ceil(4 sigma)`,
//! and renormalized. Pixels outside the grid contribute 0.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::grid::{strides, ImageGrid};

/// Bandwidth and truncation half-width of a sampled Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    pub sigma: f64,
    pub truncation_radius: usize,
}

impl KernelSpec {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return invalid(format!("sigma must be finite and >= 0, got {sigma}"));
        }
        let truncation_radius = if sigma == 0.0 {
            0
        } else {
            ((4.0 * sigma).ceil() as usize).max(1)
        };
        Ok(Self {
            sigma,
            truncation_radius,
        })
    }

    fn unnormalized(&self) -> Vec<f64> {
        let r = self.truncation_radius as i64;
        let s2 = self.sigma * self.sigma;
        (-r..=r)
            .map(|j| (-0.5 * (j * j) as f64 / s2).exp())
            .collect()
    }
}

/// Sampled Gaussian weights over `[-r, r]`, summing to 1. `sigma = 0` gives `[1]`.
pub fn gaussian_kernel_1d(sigma: f64) -> Result<Vec<f64>> {
    let spec = KernelSpec::new(sigma)?;
    if spec.sigma == 0.0 {
        return Ok(vec![1.0]);
    }
    let mut w = spec.unnormalized();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    Ok(w)
}

/// Derivative-of-Gaussian taps `c[j]` for the correlation
/// `out(i) = sum_j c[j] in(i + j)`.
///
/// The taps are antisymmetric and scaled so that a unit ramp maps to 1.
pub fn gaussian_derivative_kernel_1d(sigma: f64) -> Result<Vec<f64>> {
    let spec = KernelSpec::new(sigma)?;
    if spec.sigma == 0.0 {
        return invalid("derivative filter needs sigma > 0");
    }
    let g = spec.unnormalized();
    let r = spec.truncation_radius as i64;
    let second_moment: f64 = (-r..=r)
        .zip(&g)
        .map(|(j, w)| (j * j) as f64 * w)
        .sum();
    Ok((-r..=r)
        .zip(&g)
        .map(|(j, w)| j as f64 * w / second_moment)
        .collect())
}

/// Correlates every line along `axis` with `taps` (centered), zero outside.
///
/// Summation order within a line is fixed, so results do not depend on how
/// lines are distributed across threads.
pub(crate) fn correlate_axis(grid: &ImageGrid, taps: &[f64], axis: usize) -> ImageGrid {
    let shape = grid.shape();
    let n = shape[axis];
    let stride = strides(shape)[axis];
    let block = n * stride;
    let r = (taps.len() / 2) as i64;
    let src = grid.data();
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(block)
        .zip(src.par_chunks(block))
        .for_each(|(dst, line_block)| {
            for inner in 0..stride {
                for i in 0..n as i64 {
                    let lo = (-r).max(-i);
                    let hi = r.min(n as i64 - 1 - i);
                    let mut acc = 0.0;
                    for j in lo..=hi {
                        acc += taps[(j + r) as usize] * line_block[((i + j) as usize) * stride + inner];
                    }
                    dst[i as usize * stride + inner] = acc;
                }
            }
        });
    ImageGrid::from_parts(shape.to_vec(), out)
}

/// Separable Gaussian smoothing with bandwidth `sigma` (pixels).
pub fn gaussian_smooth(grid: &ImageGrid, sigma: f64) -> Result<ImageGrid> {
    let kernel = gaussian_kernel_1d(sigma)?;
    if kernel.len() == 1 {
        return Ok(grid.clone());
    }
    let mut out = correlate_axis(grid, &kernel, 0);
    for axis in 1..grid.dim() {
        out = correlate_axis(&out, &kernel, axis);
    }
    Ok(out)
}

/// Gaussian derivative along `axis`, Gaussian smoothing along the others.
pub fn gaussian_derivative(grid: &ImageGrid, sigma: f64, axis: usize) -> Result<ImageGrid> {
    if !(sigma > 0.0) {
        return invalid(format!("derivative filter needs sigma > 0, got {sigma}"));
    }
    if axis >= grid.dim() {
        return invalid(format!("axis {axis} out of range for dimension {}", grid.dim()));
    }
    let deriv = gaussian_derivative_kernel_1d(sigma)?;
    let smooth = gaussian_kernel_1d(sigma)?;
    let mut out = grid.clone();
    for a in 0..grid.dim() {
        let taps = if a == axis { &deriv } else { &smooth };
        out = correlate_axis(&out, taps, a);
    }
    Ok(out)
}

/// Factor-2 decimation after `gaussian_smooth(sigma = 1)`; keeps even indices.
pub fn downsample2(grid: &ImageGrid) -> Result<ImageGrid> {
    let smoothed = gaussian_smooth(grid, 1.0)?;
    let shape: Vec<usize> = grid.shape().iter().map(|&n| n.div_ceil(2)).collect();
    ImageGrid::from_fn(&shape, |idx| {
        let src: Vec<usize> = idx.iter().map(|&i| 2 * i).collect();
        smoothed.get(&src)
    })
}

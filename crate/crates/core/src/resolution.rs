//! The per-pixel template resolution `sigma*`.
//!
//! All registered images are smoothed with bandwidths `0, s, 2s, ...`. A
//! pixel receives `sigma*` equal to the first bandwidth at which the
//! pixelwise `(p0, p1)` quantile range of the smoothed stack is at most
//! `eta (p1 - p0)`; it keeps that value even if the range later grows again.

use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::grid::{pixelwise_quantile_range, ImageGrid, ImageStack};
use crate::smoothing::gaussian_smooth;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResolutionConfig {
    /// Effective edge height, in intensity units.
    pub eta: f64,
    pub p0: f64,
    pub p1: f64,
    /// Bandwidth increment in pixels.
    pub step: f64,
    /// Largest bandwidth tried; pixels still unsatisfied are reported as capped.
    pub sigma_cap: f64,
}

impl ResolutionConfig {
    pub fn new(eta: f64, p0: f64, p1: f64, step: f64, sigma_cap: f64) -> Result<Self> {
        let cfg = Self { eta, p0, p1, step, sigma_cap };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults for a stack of the given shape: `p0 = 0.1`, `p1 = 0.9`,
    /// `step = 0.25` and a cap of twice the largest grid extent.
    pub fn for_shape(eta: f64, shape: &[usize]) -> Result<Self> {
        let extent = shape.iter().copied().max().unwrap_or(1) as f64;
        Self::new(eta, 0.1, 0.9, 0.25, 2.0 * extent)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return invalid(format!("eta must be finite and > 0, got {}", self.eta));
        }
        if !(self.p0 > 0.0 && self.p0 < self.p1 && self.p1 < 1.0) {
            return invalid(format!("need 0 < p0 < p1 < 1, got ({}, {})", self.p0, self.p1));
        }
        if !(self.step > 0.0) || !self.step.is_finite() {
            return invalid(format!("step must be finite and > 0, got {}", self.step));
        }
        if !(self.sigma_cap >= self.step) {
            return invalid(format!("sigma_cap {} must be >= step {}", self.sigma_cap, self.step));
        }
        Ok(())
    }
}

/// `eta (p1 - p0)`.
pub fn threshold_value(cfg: &ResolutionConfig) -> f64 {
    cfg.eta * (cfg.p1 - cfg.p0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResolutionField {
    pub sigma_star: ImageGrid,
    /// Number of bandwidths evaluated (the `sigma = 0` pass included).
    pub iterations_used: usize,
    /// Pixels that never met the threshold up to `sigma_cap`; they carry `sigma_cap`.
    pub capped_pixels: usize,
}

impl ResolutionField {
    pub fn is_capped(&self) -> bool {
        self.capped_pixels > 0
    }

    pub fn max(&self) -> f64 {
        self.sigma_star.min_max().1
    }

    /// Mean over pixels with `sigma* > 0`, or 0 if there are none.
    pub fn mean_positive(&self) -> f64 {
        let (sum, count) = self
            .sigma_star
            .data()
            .iter()
            .filter(|&&v| v > 0.0)
            .fold((0.0, 0usize), |(s, c), &v| (s + v, c + 1));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

pub fn resolution_measure(registered: &ImageStack, cfg: &ResolutionConfig) -> Result<ResolutionField> {
    cfg.validate()?;
    if registered.len() < 2 {
        return invalid("resolution measure needs at least 2 registered images");
    }
    if registered
        .iter()
        .any(|im| im.data().iter().any(|v| !v.is_finite()))
    {
        return invalid("non-finite intensity in registered stack");
    }

    let threshold = threshold_value(cfg);
    let len = registered.pixel_count();
    let mut sigma_star = vec![0.0; len];
    let mut satisfied = vec![false; len];
    let mut remaining = len;
    let mut iterations = 0usize;

    loop {
        let sigma = iterations as f64 * cfg.step;
        if sigma > cfg.sigma_cap {
            break;
        }
        iterations += 1;
        let smoothed = registered
            .images()
            .par_iter()
            .map(|im| gaussian_smooth(im, sigma))
            .collect::<Result<Vec<_>>>()?;
        let range = pixelwise_quantile_range(&ImageStack::new(smoothed)?, cfg.p0, cfg.p1)?;
        for (p, &r) in range.data().iter().enumerate() {
            if !satisfied[p] && r <= threshold {
                satisfied[p] = true;
                sigma_star[p] = sigma;
                remaining -= 1;
            }
        }
        log::trace!("sigma = {sigma}: {remaining} pixel(s) unsatisfied");
        if remaining == 0 {
            break;
        }
    }

    for (p, done) in satisfied.iter().enumerate() {
        if !done {
            sigma_star[p] = cfg.sigma_cap;
        }
    }
    if remaining > 0 {
        log::warn!("{remaining} pixel(s) did not reach the quantile threshold by sigma = {}", cfg.sigma_cap);
    }
    Ok(ResolutionField {
        sigma_star: ImageGrid::new(registered.shape().to_vec(), sigma_star)?,
        iterations_used: iterations,
        capped_pixels: remaining,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(eta: f64) -> ResolutionConfig {
        ResolutionConfig::new(eta, 0.1, 0.9, 0.25, 64.0).unwrap()
    }

    #[test]
    fn thresholds() {
        assert!((threshold_value(&cfg(1.0)) - 0.8).abs() < 1e-15);
        assert!((threshold_value(&cfg(0.6)) - 0.48).abs() < 1e-15);
        let c = ResolutionConfig::new(0.5, 0.25, 0.75, 0.25, 1.0).unwrap();
        assert_eq!(threshold_value(&c), 0.25);
    }

    #[test]
    fn config_validation() {
        assert!(ResolutionConfig::new(0.0, 0.1, 0.9, 0.25, 10.0).is_err());
        assert!(ResolutionConfig::new(1.0, 0.9, 0.1, 0.25, 10.0).is_err());
        assert!(ResolutionConfig::new(1.0, 0.1, 0.9, 0.0, 10.0).is_err());
        assert!(ResolutionConfig::new(1.0, 0.1, 0.9, 0.5, 0.25).is_err());
    }

    #[test]
    fn identical_images_resolve_at_zero() {
        let im = ImageGrid::from_fn(&[6, 7], |i| (i[0] + i[1]) as f64 / 13.0).unwrap();
        let stack = ImageStack::new(vec![im.clone(), im.clone(), im]).unwrap();
        let f = resolution_measure(&stack, &cfg(0.5)).unwrap();
        assert_eq!(f.iterations_used, 1);
        assert_eq!(f.capped_pixels, 0);
        assert!(f.sigma_star.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_single_image() {
        let im = ImageGrid::zeros(&[4]).unwrap();
        let stack = ImageStack::new(vec![im]).unwrap();
        assert!(resolution_measure(&stack, &cfg(1.0)).is_err());
    }

    #[test]
    fn capping_is_reported() {
        // two far-apart impulses; a tiny cap leaves the middle unsatisfied
        let mut a = vec![0.0; 21];
        let mut b = vec![0.0; 21];
        a[5] = 1.0;
        b[15] = 1.0;
        let stack = ImageStack::new(vec![
            ImageGrid::new(vec![21], a).unwrap(),
            ImageGrid::new(vec![21], b).unwrap(),
        ])
        .unwrap();
        let c = ResolutionConfig::new(0.1, 0.1, 0.9, 0.25, 0.5).unwrap();
        let f = resolution_measure(&stack, &c).unwrap();
        assert!(f.capped_pixels > 0);
        assert_eq!(f.iterations_used, 3);
        assert_eq!(f.sigma_star.data()[5], 0.5);
        assert!(f.sigma_star.data().iter().all(|&v| v <= 0.5));
    }

    #[test]
    fn sigma_star_is_multiple_of_step() {
        let mut a = vec![0.0; 40];
        let mut b = vec![0.0; 40];
        a[10..20].fill(1.0);
        b[13..23].fill(1.0);
        let stack = ImageStack::new(vec![
            ImageGrid::new(vec![40], a).unwrap(),
            ImageGrid::new(vec![40], b).unwrap(),
        ])
        .unwrap();
        let c = ResolutionConfig::new(0.5, 0.1, 0.9, 0.3, 80.0).unwrap();
        let f = resolution_measure(&stack, &c).unwrap();
        assert_eq!(f.capped_pixels, 0);
        for &v in f.sigma_star.data() {
            let k = v / 0.3;
            assert!((k - k.round()).abs() < 1e-9);
        }
        assert!(f.max() > 0.0);
    }
}

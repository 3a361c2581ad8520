//! One-dimensional theory of misaligned edges and point masses under
//! Gaussian smoothing, plus seeded samplers for synthetic edge stacks.

use std::f64::consts::{PI, SQRT_2};

use rand_chacha::rand_core::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::grid::{ImageGrid, ImageStack};

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// Error function by its Maclaurin series; accurate for `|x| <= 2.5`.
fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    for n in 1..200 {
        term *= -x2 / n as f64;
        let contrib = term / (2 * n + 1) as f64;
        sum += contrib;
        if contrib.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    2.0 * FRAC_1_SQRT_PI * sum
}

/// Complementary error function for `x >= 2.5` by the Laplace continued
/// fraction `erfc(x) = e^{-x^2}/sqrt(pi) / (x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))`,
/// evaluated bottom-up.
fn erfc_continued_fraction(x: f64) -> f64 {
    let mut tail = x;
    for k in (1..=80).rev() {
        tail = x + (k as f64 / 2.0) / tail;
    }
    (-x * x).exp() * FRAC_1_SQRT_PI / tail
}

/// Standard normal distribution function.
///
/// Uses the erf Maclaurin series near the origin and the erfc continued
/// fraction in the tails; absolute error is below 1e-13.
pub fn std_normal_cdf(x: f64) -> f64 {
    let z = x / SQRT_2;
    if z.abs() <= 2.5 {
        0.5 * (1.0 + erf_series(z))
    } else if z > 0.0 {
        1.0 - 0.5 * erfc_continued_fraction(z)
    } else {
        0.5 * erfc_continued_fraction(-z)
    }
}

/// Unit Gaussian density `K_1`.
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn require_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) || !v.is_finite() {
        return invalid(format!("{name} must be finite and > 0, got {v}"));
    }
    Ok(())
}

/// Maximal difference `|2 Phi(tau / (2 sigma)) - 1|` between two sharp edges
/// `tau` apart after smoothing with bandwidth `sigma`.
pub fn edge_max_diff(tau: f64, sigma: f64) -> Result<f64> {
    require_positive("sigma", sigma)?;
    Ok((2.0 * std_normal_cdf(0.5 * tau / sigma) - 1.0).abs())
}

/// Linearized maximal rescaled difference of two point masses `tau` apart:
/// `|tau / sigma| / sqrt(2 pi e)`.
pub fn point_mass_max_diff_approx(tau: f64, sigma: f64) -> Result<f64> {
    require_positive("sigma", sigma)?;
    Ok((tau / sigma).abs() / (2.0 * PI * std::f64::consts::E).sqrt())
}

/// Location and value of the maximum of `sigma |K_sigma(x) - K_sigma(x - tau)|`.
///
/// Dense scan of `[-tau/2 - 6 sigma, tau/2 + 6 sigma]` at step `sigma / 1000`,
/// then golden-section refinement around the best sample.
pub fn point_mass_max_diff_exact_argmax(tau: f64, sigma: f64) -> Result<(f64, f64)> {
    require_positive("sigma", sigma)?;
    let f = |x: f64| (std_normal_pdf(x / sigma) - std_normal_pdf((x - tau) / sigma)).abs();
    if tau == 0.0 {
        return Ok((0.0, 0.0));
    }
    let half = 0.5 * tau.abs();
    let lo = -half - 6.0 * sigma;
    let hi = half + 6.0 * sigma;
    let h = sigma / 1000.0;
    let steps = ((hi - lo) / h).ceil() as usize;
    let (mut best_x, mut best_v) = (lo, f(lo));
    for k in 1..=steps {
        let x = (lo + k as f64 * h).min(hi);
        let v = f(x);
        if v > best_v {
            best_x = x;
            best_v = v;
        }
    }
    let (x, v) = golden_section_max(&f, best_x - h, best_x + h, 1e-12 * sigma);
    Ok(if v > best_v { (x, v) } else { (best_x, best_v) })
}

/// Exact maximal rescaled point-mass difference; see
/// [`point_mass_max_diff_exact_argmax`].
pub fn point_mass_max_diff_exact(tau: f64, sigma: f64) -> Result<f64> {
    Ok(point_mass_max_diff_exact_argmax(tau, sigma)?.1)
}

fn golden_section_max(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// Intensity at 0 of a sharp edge at `shift` smoothed with bandwidth `tau`,
/// i.e. `Phi(shift / tau)`.
pub fn smoothed_edge_value_at_zero(shift: f64, tau: f64) -> Result<f64> {
    require_positive("tau", tau)?;
    Ok(std_normal_cdf(shift / tau))
}

/// Seeded standard normal draws: Box–Muller on the ChaCha8 stream.
///
/// ChaCha is a counter-mode generator, so the sequence for a seed is fixed
/// across platforms and releases of this crate.
#[derive(Clone, Debug)]
pub struct NormalSampler {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform in (0, 1].
    pub fn uniform_open0(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open0();
        let u2 = self.uniform_open0();
        let r = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * PI * u2;
        self.spare = Some(r * angle.sin());
        r * angle.cos()
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        mean + sd * self.standard()
    }
}

/// A 1D pixel grid of `len` pixels on which pixel `origin` sits at `x = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeGrid {
    pub len: usize,
    pub origin: usize,
}

impl EdgeGrid {
    /// Grid of `len` pixels with `x = 0` at pixel `len / 2`.
    pub fn centered(len: usize) -> Self {
        Self {
            len,
            origin: len / 2,
        }
    }

    pub fn position(&self, pixel: usize) -> f64 {
        pixel as f64 - self.origin as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeSampleSpec {
    pub n: usize,
    pub tau: f64,
    pub grid: EdgeGrid,
    pub seed: u64,
}

/// Sharp edges `1{x <= s_i}` with shifts `s_i ~ N(0, tau^2)`.
#[derive(Clone, Debug)]
pub struct EdgeSample {
    pub shifts: Vec<f64>,
    pub stack: ImageStack,
}

pub fn sample_edges(spec: &EdgeSampleSpec) -> Result<EdgeSample> {
    if spec.n == 0 {
        return invalid("edge sample needs n >= 1");
    }
    if !(spec.tau >= 0.0) || !spec.tau.is_finite() {
        return invalid(format!("tau must be finite and >= 0, got {}", spec.tau));
    }
    if spec.grid.len == 0 || spec.grid.origin >= spec.grid.len {
        return invalid("edge grid origin must lie inside a non-empty grid");
    }
    let mut sampler = NormalSampler::new(spec.seed);
    let shifts: Vec<f64> = (0..spec.n).map(|_| sampler.normal(0.0, spec.tau)).collect();
    let images = shifts
        .iter()
        .map(|&s| {
            let data = (0..spec.grid.len)
                .map(|p| if spec.grid.position(p) <= s { 1.0 } else { 0.0 })
                .collect();
            ImageGrid::new(vec![spec.grid.len], data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EdgeSample {
        shifts,
        stack: ImageStack::new(images)?,
    })
}

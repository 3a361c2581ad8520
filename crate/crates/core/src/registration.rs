//! Groupwise registration with affine or rigid transformations.
//!
//! Minimizes `E(T, theta_1..n) = sum_i L_sim(I_i o Psi_i^{-1}, c_i T) + lambda L_reg(Psi_i^{-1})`
//! by alternating between a closed-form template update and finite-difference
//! gradient descent on each image's transform parameters. Transforms act on
//! pixel coordinates measured from the grid center, so `b` is the
//! displacement of the center and the linear part rotates or shears about it.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::grid::{cmp_f64, ImageGrid, ImageStack};
use crate::smoothing::downsample2;

const DET_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransformKind {
    Affine,
    Rigid,
}

impl TransformKind {
    /// Number of free parameters in dimension `dim`.
    pub fn param_count(self, dim: usize) -> usize {
        match self {
            TransformKind::Affine => dim * dim + dim,
            TransformKind::Rigid => rotation_angle_count(dim) + dim,
        }
    }
}

impl std::str::FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "affine" => Ok(Self::Affine),
            "rigid" => Ok(Self::Rigid),
            other => invalid(format!("unknown transform kind '{other}'")),
        }
    }
}

impl std::fmt::Display for TransformKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransformKind::Affine => "affine",
            TransformKind::Rigid => "rigid",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    L2,
    L1,
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(Self::L2),
            "l1" => Ok(Self::L1),
            other => invalid(format!("unknown norm '{other}'")),
        }
    }
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Norm::L2 => "l2",
            Norm::L1 => "l1",
        })
    }
}

fn rotation_angle_count(dim: usize) -> usize {
    match dim {
        2 => 1,
        3 => 3,
        _ => 0,
    }
}

/// `Psi(x) = A x + b` on center-relative pixel coordinates.
///
/// Rigid transforms keep their rotation angles and regenerate `A` from them,
/// so `A` is exactly orthogonal up to rounding. In 3D the angles are
/// `(alpha, beta, gamma)` with `A = Rz(gamma) Ry(beta) Rx(alpha)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transform {
    kind: TransformKind,
    dim: usize,
    matrix: Vec<f64>,
    translation: Vec<f64>,
    angles: Vec<f64>,
}

impl Transform {
    pub fn identity(kind: TransformKind, dim: usize) -> Self {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = 1.0;
        }
        Self {
            kind,
            dim,
            matrix,
            translation: vec![0.0; dim],
            angles: vec![0.0; if kind == TransformKind::Rigid { rotation_angle_count(dim) } else { 0 }],
        }
    }

    /// General affine map from a row-major `dim x dim` matrix.
    pub fn affine(matrix: Vec<f64>, translation: Vec<f64>) -> Result<Self> {
        let dim = translation.len();
        if !(1..=3).contains(&dim) || matrix.len() != dim * dim {
            return Err(Error::InvalidTransform(format!(
                "matrix of {} entries does not match translation of dimension {dim}",
                matrix.len()
            )));
        }
        if matrix.iter().chain(&translation).any(|v| !v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite parameter".into()));
        }
        let t = Self {
            kind: TransformKind::Affine,
            dim,
            matrix,
            translation,
            angles: Vec::new(),
        };
        if t.det().abs() <= DET_EPS {
            return Err(Error::InvalidTransform(format!("singular matrix (det = {})", t.det())));
        }
        Ok(t)
    }

    /// Rotation by `angles` (radians) plus translation.
    pub fn rigid(angles: Vec<f64>, translation: Vec<f64>) -> Result<Self> {
        let dim = translation.len();
        if !(1..=3).contains(&dim) || angles.len() != rotation_angle_count(dim) {
            return Err(Error::InvalidTransform(format!(
                "dimension {dim} rigid transform needs {} angles, got {}",
                rotation_angle_count(dim),
                angles.len()
            )));
        }
        if angles.iter().chain(&translation).any(|v| !v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite parameter".into()));
        }
        Ok(Self {
            kind: TransformKind::Rigid,
            dim,
            matrix: rotation_matrix(dim, &angles),
            translation,
            angles,
        })
    }

    /// Builds a transform from its flat parameter vector (see [`Transform::params`]).
    pub fn from_params(kind: TransformKind, dim: usize, params: &[f64]) -> Result<Self> {
        if params.len() != kind.param_count(dim) {
            return Err(Error::InvalidTransform(format!(
                "{kind} transform in {dim}D needs {} parameters, got {}",
                kind.param_count(dim),
                params.len()
            )));
        }
        match kind {
            TransformKind::Affine => {
                let (m, b) = params.split_at(dim * dim);
                Self::affine(m.to_vec(), b.to_vec())
            }
            TransformKind::Rigid => {
                let (a, b) = params.split_at(rotation_angle_count(dim));
                Self::rigid(a.to_vec(), b.to_vec())
            }
        }
    }

    /// Matrix entries then translation (affine), or angles then translation (rigid).
    pub fn params(&self) -> Vec<f64> {
        let head = match self.kind {
            TransformKind::Affine => &self.matrix,
            TransformKind::Rigid => &self.angles,
        };
        head.iter().chain(&self.translation).copied().collect()
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn translation(&self) -> &[f64] {
        &self.translation
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn det(&self) -> f64 {
        det(self.dim, &self.matrix)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|r| (0..d).map(|c| self.matrix[r * d + c] * x[c]).sum::<f64>() + self.translation[r])
            .collect()
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = invert(self.dim, &self.matrix)
            .ok_or_else(|| Error::InvalidTransform(format!("singular matrix (det = {})", self.det())))?;
        let d = self.dim;
        let b: Vec<f64> = (0..d)
            .map(|r| -(0..d).map(|c| inv[r * d + c] * self.translation[c]).sum::<f64>())
            .collect();
        match self.kind {
            TransformKind::Affine => Self::affine(inv, b),
            TransformKind::Rigid => {
                let angles = match d {
                    2 => vec![-self.angles[0]],
                    3 => euler_zyx(&inv),
                    _ => Vec::new(),
                };
                Self::rigid(angles, b)
            }
        }
    }

    /// `self o other`.
    pub fn compose(&self, other: &Transform) -> Result<Self> {
        let d = self.dim;
        if other.dim != d {
            return Err(Error::InvalidTransform("dimension mismatch in composition".into()));
        }
        let m: Vec<f64> = (0..d * d)
            .map(|k| {
                let (r, c) = (k / d, k % d);
                (0..d).map(|j| self.matrix[r * d + j] * other.matrix[j * d + c]).sum()
            })
            .collect();
        let b = self.apply(&other.translation);
        match (self.kind, other.kind) {
            (TransformKind::Rigid, TransformKind::Rigid) => {
                let angles = match d {
                    2 => vec![self.angles[0] + other.angles[0]],
                    3 => euler_zyx(&m),
                    _ => Vec::new(),
                };
                Self::rigid(angles, b)
            }
            _ => Self::affine(m, b),
        }
    }

    fn with_kind(mut self, kind: TransformKind) -> Self {
        if kind == TransformKind::Affine {
            self.angles.clear();
        }
        self.kind = kind;
        self
    }
}

fn rotation_matrix(dim: usize, angles: &[f64]) -> Vec<f64> {
    match dim {
        1 => vec![1.0],
        2 => {
            let (s, c) = angles[0].sin_cos();
            vec![c, -s, s, c]
        }
        _ => {
            let (sa, ca) = angles[0].sin_cos();
            let (sb, cb) = angles[1].sin_cos();
            let (sg, cg) = angles[2].sin_cos();
            vec![
                cg * cb,
                cg * sb * sa - sg * ca,
                cg * sb * ca + sg * sa,
                sg * cb,
                sg * sb * sa + cg * ca,
                sg * sb * ca - cg * sa,
                -sb,
                cb * sa,
                cb * ca,
            ]
        }
    }
}

fn euler_zyx(m: &[f64]) -> Vec<f64> {
    let beta = (-m[6]).clamp(-1.0, 1.0).asin();
    let alpha = m[7].atan2(m[8]);
    let gamma = m[3].atan2(m[0]);
    vec![alpha, beta, gamma]
}

fn det(d: usize, m: &[f64]) -> f64 {
    match d {
        1 => m[0],
        2 => m[0] * m[3] - m[1] * m[2],
        _ => {
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6])
        }
    }
}

fn invert(d: usize, m: &[f64]) -> Option<Vec<f64>> {
    let det = det(d, m);
    if det.abs() <= DET_EPS || !det.is_finite() {
        return None;
    }
    let inv = match d {
        1 => vec![1.0 / m[0]],
        2 => vec![m[3] / det, -m[1] / det, -m[2] / det, m[0] / det],
        _ => {
            let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0 * 3 + c0] * m[r1 * 3 + c1] - m[r0 * 3 + c1] * m[r1 * 3 + c0];
            vec![
                cof(1, 2, 1, 2) / det,
                -cof(0, 2, 1, 2) / det,
                cof(0, 1, 1, 2) / det,
                -cof(1, 2, 0, 2) / det,
                cof(0, 2, 0, 2) / det,
                -cof(0, 1, 0, 2) / det,
                cof(1, 2, 0, 1) / det,
                -cof(0, 2, 0, 1) / det,
                cof(0, 1, 0, 1) / det,
            ]
        }
    };
    Some(inv)
}

/// Resamples `image` at `Psi^{-1}(y)` for every output pixel `y`; zero
/// outside the source domain.
pub fn warp(image: &ImageGrid, t: &Transform) -> Result<ImageGrid> {
    if t.dim() != image.dim() {
        return Err(Error::InvalidTransform(format!(
            "{}D transform applied to {}D image",
            t.dim(),
            image.dim()
        )));
    }
    let inv = t.inverse()?;
    let len = image.len();
    let data = if len >= 8192 {
        (0..len)
            .into_par_iter()
            .map_init(|| (vec![0.0; 3], vec![0.0; 3]), |(y, x), p| warp_pixel(image, &inv, p, y, x))
            .collect()
    } else {
        let (mut y, mut x) = (vec![0.0; 3], vec![0.0; 3]);
        (0..len).map(|p| warp_pixel(image, &inv, p, &mut y, &mut x)).collect()
    };
    Ok(ImageGrid::from_parts(image.shape().to_vec(), data))
}

fn warp_pixel(image: &ImageGrid, inv: &Transform, flat: usize, y: &mut [f64], x: &mut [f64]) -> f64 {
    let shape = image.shape();
    let d = shape.len();
    let mut rest = flat;
    for axis in (0..d).rev() {
        let n = shape[axis];
        y[axis] = (rest % n) as f64 - (n as f64 - 1.0) / 2.0;
        rest /= n;
    }
    let m = &inv.matrix;
    for r in 0..d {
        let mut acc = inv.translation[r];
        for c in 0..d {
            acc += m[r * d + c] * y[c];
        }
        x[r] = acc + (shape[r] as f64 - 1.0) / 2.0;
    }
    image.sample_unchecked(&x[..d])
}

/// Sum of squared (L2) or absolute (L1) pixel differences.
pub fn similarity(a: &ImageGrid, b: &ImageGrid, norm: Norm) -> Result<f64> {
    if a.shape() != b.shape() {
        return invalid(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(scaled_similarity(a.data(), b.data(), 1.0, norm))
}

/// `L_sim(a, scale * b)`.
fn scaled_similarity(a: &[f64], b: &[f64], scale: f64, norm: Norm) -> f64 {
    let diffs = a.iter().zip(b).map(|(x, y)| x - scale * y);
    match norm {
        Norm::L2 => diffs.map(|d| d * d).sum(),
        Norm::L1 => diffs.map(f64::abs).sum(),
    }
}

/// `||A - I||_F^2 + ||b||^2`.
pub fn regularizer(t: &Transform) -> f64 {
    let d = t.dim();
    let m: f64 = t
        .matrix()
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let e = if k / d == k % d { v - 1.0 } else { *v };
            e * e
        })
        .sum();
    m + t.translation().iter().map(|v| v * v).sum::<f64>()
}

/// Backtracking line search schedule for the transform updates.
///
/// Steps are measured as the largest pixel displacement they cause, so the
/// same schedule suits matrix entries, angles and translations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSchedule {
    pub initial: f64,
    pub grow: f64,
    pub shrink: f64,
    pub max_step: f64,
    pub min_step: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self {
            initial: 0.5,
            grow: 1.5,
            shrink: 0.5,
            max_step: 4.0,
            min_step: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationConfig {
    pub transform_kind: TransformKind,
    pub norm: Norm,
    pub lambda: f64,
    pub outer_iterations: usize,
    pub inner_steps: usize,
    pub step_size_schedule: StepSchedule,
    pub fit_intensity_scale: bool,
    /// Recorded in run manifests; the optimizer itself draws no random numbers.
    pub seed: u64,
    /// Number of pyramid levels (1 disables coarse-to-fine).
    pub pyramid_levels: usize,
    /// Stop once the relative energy change of an outer iteration drops below this.
    pub tolerance: f64,
    /// Finite-difference step, in pixels of displacement.
    pub fd_step: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            transform_kind: TransformKind::Affine,
            norm: Norm::L2,
            lambda: 1e-3,
            outer_iterations: 50,
            inner_steps: 5,
            step_size_schedule: StepSchedule::default(),
            fit_intensity_scale: false,
            seed: 0,
            pyramid_levels: 2,
            tolerance: 1e-6,
            fd_step: 1e-2,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return invalid(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.outer_iterations == 0 || self.inner_steps == 0 || self.pyramid_levels == 0 {
            return invalid("iteration counts and pyramid levels must be >= 1");
        }
        if !(self.fd_step > 0.0) || !(self.tolerance >= 0.0) {
            return invalid("fd_step must be > 0 and tolerance >= 0");
        }
        let s = &self.step_size_schedule;
        if !(s.initial > 0.0 && s.grow >= 1.0 && s.shrink > 0.0 && s.shrink < 1.0 && s.min_step > 0.0 && s.max_step >= s.initial) {
            return invalid("invalid step size schedule");
        }
        Ok(())
    }
}

/// Functional value after one outer iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyRecord {
    pub iteration: usize,
    pub energy: f64,
    /// Images whose line search was exhausted and whose parameters stayed put.
    pub frozen: usize,
    /// Whether the gauge correction was applied in this iteration.
    pub centered: bool,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub template: ImageGrid,
    pub transforms: Vec<Transform>,
    pub registered: ImageStack,
    pub intensity_scales: Vec<f64>,
    /// Fine-level trace; entry 0 is the energy at initialization.
    pub energy_trace: Vec<EnergyRecord>,
}

/// Per-image optimization state.
#[derive(Clone, Debug)]
struct ImageState {
    transform: Transform,
    registered: ImageGrid,
    scale: f64,
    step: f64,
}

struct Problem<'a> {
    images: &'a [ImageGrid],
    cfg: &'a RegistrationConfig,
    /// Pixel displacement caused by a unit change of each parameter.
    param_reach: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(stack: &'a ImageStack, cfg: &'a RegistrationConfig) -> Self {
        let dim = stack.dim();
        let radius = stack
            .shape()
            .iter()
            .map(|&n| (n as f64 - 1.0) / 2.0)
            .fold(1.0, f64::max);
        let n_head = cfg.transform_kind.param_count(dim) - dim;
        let mut param_reach = vec![radius; n_head];
        param_reach.extend(std::iter::repeat_n(1.0, dim));
        Self {
            images: stack.images(),
            cfg,
            param_reach,
        }
    }

    fn image_energy(&self, registered: &ImageGrid, t: &Transform, template: &ImageGrid, scale: f64) -> f64 {
        let sim = scaled_similarity(registered.data(), template.data(), scale, self.cfg.norm);
        let reg = if self.cfg.lambda > 0.0 {
            t.inverse().map(|inv| regularizer(&inv)).unwrap_or(f64::INFINITY)
        } else {
            0.0
        };
        sim + self.cfg.lambda * reg
    }

    /// Objective of image `i` at raw parameters; infinite for degenerate maps.
    fn objective(&self, i: usize, params: &[f64], template: &ImageGrid, scale: f64) -> f64 {
        let dim = template.dim();
        match Transform::from_params(self.cfg.transform_kind, dim, params) {
            Ok(t) => match warp(&self.images[i], &t) {
                Ok(r) => self.image_energy(&r, &t, template, scale),
                Err(_) => f64::INFINITY,
            },
            Err(_) => f64::INFINITY,
        }
    }

    /// Central-difference gradient with respect to reach-normalized parameters.
    fn gradient(&self, i: usize, params: &[f64], template: &ImageGrid, scale: f64) -> Vec<f64> {
        let h = self.cfg.fd_step;
        let mut p = params.to_vec();
        (0..params.len())
            .map(|k| {
                let dk = h / self.param_reach[k];
                p[k] = params[k] + dk;
                let fp = self.objective(i, &p, template, scale);
                p[k] = params[k] - dk;
                let fm = self.objective(i, &p, template, scale);
                p[k] = params[k];
                (fp - fm) / (2.0 * h)
            })
            .collect()
    }

    /// Runs the inner gradient steps for one image. Returns true when the
    /// line search was exhausted.
    fn descend(&self, i: usize, state: &mut ImageState, template: &ImageGrid) -> bool {
        let sched = &self.cfg.step_size_schedule;
        let mut params = state.transform.params();
        let mut current = self.image_energy(&state.registered, &state.transform, template, state.scale);
        let mut exhausted = false;
        for _ in 0..self.cfg.inner_steps {
            let g = self.gradient(i, &params, template, state.scale);
            let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(gnorm > 0.0) || !gnorm.is_finite() {
                break;
            }
            let mut step = state.step;
            let accepted = loop {
                let trial: Vec<f64> = params
                    .iter()
                    .zip(&g)
                    .zip(&self.param_reach)
                    .map(|((p, gk), reach)| p - step * gk / gnorm / reach)
                    .collect();
                let f = self.objective(i, &trial, template, state.scale);
                if f <= current - 1e-4 * step * gnorm {
                    break Some((trial, f));
                }
                step *= sched.shrink;
                if step < sched.min_step {
                    break None;
                }
            };
            match accepted {
                Some((trial, f)) => {
                    params = trial;
                    current = f;
                    state.step = (step * sched.grow).min(sched.max_step);
                }
                None => {
                    state.step = sched.initial;
                    exhausted = true;
                    break;
                }
            }
        }
        let t = Transform::from_params(self.cfg.transform_kind, template.dim(), &params)
            .expect("accepted parameters have finite energy");
        state.registered = warp(&self.images[i], &t).expect("accepted transform is invertible");
        state.transform = t;
        exhausted
    }

    fn total_energy(&self, states: &[ImageState], template: &ImageGrid) -> f64 {
        states
            .iter()
            .map(|s| self.image_energy(&s.registered, &s.transform, template, s.scale))
            .sum()
    }
}

/// Pixelwise minimizer of `sum_i L_sim(R_i, c_i T)` over `T`: the weighted
/// mean (L2) or weighted median of `R_i / c_i` with weights `c_i` (L1).
/// With unit scales these are the plain mean and median.
fn update_template(states: &[ImageState], norm: Norm) -> ImageGrid {
    let shape = states[0].registered.shape().to_vec();
    let len = states[0].registered.len();
    let data: Vec<f64> = match norm {
        Norm::L2 => {
            let denom: f64 = states.iter().map(|s| s.scale * s.scale).sum();
            (0..len)
                .into_par_iter()
                .map(|p| states.iter().map(|s| s.scale * s.registered.data()[p]).sum::<f64>() / denom)
                .collect()
        }
        Norm::L1 => (0..len)
            .into_par_iter()
            .map_init(Vec::new, |buf: &mut Vec<(f64, f64)>, p| {
                buf.clear();
                buf.extend(states.iter().map(|s| (s.registered.data()[p] / s.scale, s.scale)));
                weighted_median(buf)
            })
            .collect(),
    };
    ImageGrid::from_parts(shape, data)
}

/// Weighted median of `(value, weight)` pairs; at an exact half-weight split
/// the midpoint of the two neighbouring values.
fn weighted_median(pairs: &mut [(f64, f64)]) -> f64 {
    pairs.sort_by(|a, b| cmp_f64(&a.0, &b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let half = 0.5 * total;
    let mut acc = 0.0;
    for k in 0..pairs.len() {
        acc += pairs[k].1;
        if acc > half {
            return pairs[k].0;
        }
        if acc == half {
            return 0.5 * (pairs[k].0 + pairs[(k + 1).min(pairs.len() - 1)].0);
        }
    }
    pairs[pairs.len() - 1].0
}

/// Scale `c > 0` minimizing `L_sim(R, c T)`.
fn fit_scale(registered: &ImageGrid, template: &ImageGrid, norm: Norm) -> f64 {
    const MIN_SCALE: f64 = 1e-3;
    let c = match norm {
        Norm::L2 => {
            let tt: f64 = template.data().iter().map(|v| v * v).sum();
            if tt == 0.0 {
                return 1.0;
            }
            template.data().iter().zip(registered.data()).map(|(t, r)| t * r).sum::<f64>() / tt
        }
        Norm::L1 => {
            let mut pairs: Vec<(f64, f64)> = template
                .data()
                .iter()
                .zip(registered.data())
                .filter(|(t, _)| **t != 0.0)
                .map(|(t, r)| (r / t, t.abs()))
                .collect();
            if pairs.is_empty() {
                return 1.0;
            }
            weighted_median(&mut pairs)
        }
    };
    c.max(MIN_SCALE)
}

/// Gauge correction `Psi_i -> G^{-1} o Psi_i` removing the mean translation
/// and, for affine maps, the mean log-determinant.
fn gauge_correction(states: &[ImageState], kind: TransformKind, dim: usize) -> Option<Transform> {
    let n = states.len() as f64;
    let mean_b: Vec<f64> = (0..dim)
        .map(|k| states.iter().map(|s| s.transform.translation()[k]).sum::<f64>() / n)
        .collect();
    let scale = match kind {
        TransformKind::Affine => {
            let mean_logdet = states.iter().map(|s| s.transform.det().abs().ln()).sum::<f64>() / n;
            (mean_logdet / dim as f64).exp()
        }
        TransformKind::Rigid => 1.0,
    };
    let drift = mean_b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if drift < 1e-12 && (scale - 1.0).abs() < 1e-12 {
        return None;
    }
    let g = match kind {
        TransformKind::Affine => {
            let mut m = vec![0.0; dim * dim];
            for i in 0..dim {
                m[i * dim + i] = scale;
            }
            Transform::affine(m, mean_b).ok()?
        }
        TransformKind::Rigid => Transform::rigid(vec![0.0; rotation_angle_count(dim)], mean_b).ok()?,
    };
    g.inverse().ok()
}

fn refresh_scales(states: &mut [ImageState], template: &ImageGrid, norm: Norm) {
    states
        .par_iter_mut()
        .for_each(|s| s.scale = fit_scale(&s.registered, template, norm));
}

fn run_level(
    stack: &ImageStack,
    cfg: &RegistrationConfig,
    init: Vec<(Transform, f64)>,
) -> Result<RegistrationResult> {
    let problem = Problem::new(stack, cfg);
    let dim = stack.dim();
    let mut states: Vec<ImageState> = init
        .into_iter()
        .zip(stack.images())
        .map(|((transform, scale), im)| {
            Ok(ImageState {
                registered: warp(im, &transform)?,
                transform,
                scale,
                step: cfg.step_size_schedule.initial,
            })
        })
        .collect::<Result<_>>()?;

    let mut template = ImageStack::new(states.iter().map(|s| s.registered.clone()).collect())?.pixelwise_mean();
    let mut energy = problem.total_energy(&states, &template);
    let mut trace = vec![EnergyRecord {
        iteration: 0,
        energy,
        frozen: 0,
        centered: false,
    }];

    for iteration in 1..=cfg.outer_iterations {
        // template (and scale) update, optionally after the gauge correction
        let mut plain = states.clone();
        let mut t_plain = update_template(&plain, cfg.norm);
        if cfg.fit_intensity_scale {
            refresh_scales(&mut plain, &t_plain, cfg.norm);
            t_plain = update_template(&plain, cfg.norm);
        }
        let e_plain = problem.total_energy(&plain, &t_plain);
        let mut centered = false;
        let mut best = (plain, t_plain, e_plain);
        if let Some(g) = gauge_correction(&states, cfg.transform_kind, dim) {
            let shifted: Result<Vec<ImageState>> = states
                .iter()
                .zip(stack.images())
                .map(|(s, im)| {
                    let t = g.compose(&s.transform)?.with_kind(cfg.transform_kind);
                    Ok(ImageState {
                        registered: warp(im, &t)?,
                        transform: t,
                        ..s.clone()
                    })
                })
                .collect();
            if let Ok(mut shifted) = shifted {
                let mut t_shift = update_template(&shifted, cfg.norm);
                if cfg.fit_intensity_scale {
                    refresh_scales(&mut shifted, &t_shift, cfg.norm);
                    t_shift = update_template(&shifted, cfg.norm);
                }
                let e_shift = problem.total_energy(&shifted, &t_shift);
                if e_shift <= best.2 {
                    best = (shifted, t_shift, e_shift);
                    centered = true;
                }
            }
        }
        let (next_states, next_template, _) = best;
        states = next_states;
        template = next_template;

        let flags: Vec<bool> = states
            .par_iter_mut()
            .enumerate()
            .map(|(i, s)| problem.descend(i, s, &template))
            .collect();
        let frozen = flags.iter().filter(|&&f| f).count();
        if frozen > 0 {
            log::debug!("iteration {iteration}: line search exhausted for {frozen} image(s)");
        }

        let new_energy = problem.total_energy(&states, &template);
        trace.push(EnergyRecord {
            iteration,
            energy: new_energy,
            frozen,
            centered,
        });
        let change = (energy - new_energy).abs() / energy.abs().max(f64::MIN_POSITIVE);
        energy = new_energy;
        if energy == 0.0 || change < cfg.tolerance {
            break;
        }
    }

    Ok(RegistrationResult {
        registered: ImageStack::new(states.iter().map(|s| s.registered.clone()).collect())?,
        transforms: states.iter().map(|s| s.transform.clone()).collect(),
        intensity_scales: states.iter().map(|s| s.scale).collect(),
        template,
        energy_trace: trace,
    })
}

/// Maps a transform estimated on a factor-2 decimated grid to the full grid.
fn upsample_transform(t: &Transform, fine_shape: &[usize], coarse_shape: &[usize]) -> Result<Transform> {
    let d = t.dim();
    // fine = 2 * coarse; center offset between the two grids
    let offset: Vec<f64> = (0..d)
        .map(|k| (fine_shape[k] as f64 - 1.0) / 2.0 - (coarse_shape[k] as f64 - 1.0))
        .collect();
    let m = t.matrix();
    let b: Vec<f64> = (0..d)
        .map(|r| {
            let lin: f64 = (0..d)
                .map(|c| (m[r * d + c] - if r == c { 1.0 } else { 0.0 }) * offset[c])
                .sum();
            2.0 * t.translation()[r] + lin
        })
        .collect();
    match t.kind() {
        TransformKind::Affine => Transform::affine(m.to_vec(), b),
        TransformKind::Rigid => Transform::rigid(t.angles().to_vec(), b),
    }
}

/// Groupwise registration of `stack` into a common template.
pub fn groupwise_register(stack: &ImageStack, cfg: &RegistrationConfig) -> Result<RegistrationResult> {
    cfg.validate()?;
    if stack.len() < 2 {
        return invalid("groupwise registration needs at least 2 images");
    }
    let dim = stack.dim();
    let identity = vec![(Transform::identity(cfg.transform_kind, dim), 1.0); stack.len()];

    let coarse_ok = cfg.pyramid_levels > 1 && stack.shape().iter().all(|&n| n >= 16);
    if !coarse_ok {
        return run_level(stack, cfg, identity);
    }
    let coarse_images = stack
        .images()
        .par_iter()
        .map(downsample2)
        .collect::<Result<Vec<_>>>()?;
    let coarse = ImageStack::new(coarse_images)?;
    let coarse_cfg = RegistrationConfig {
        pyramid_levels: cfg.pyramid_levels - 1,
        ..cfg.clone()
    };
    let coarse_result = groupwise_register(&coarse, &coarse_cfg)?;
    let init = coarse_result
        .transforms
        .iter()
        .zip(&coarse_result.intensity_scales)
        .map(|(t, &c)| Ok((upsample_transform(t, stack.shape(), coarse.shape())?, c)))
        .collect::<Result<Vec<_>>>()?;
    run_level(stack, cfg, init)
}

/// Richer five-point stencil for the same gradient; test support.
#[cfg(test)]
fn gradient_five_point(problem: &Problem, i: usize, params: &[f64], template: &ImageGrid) -> Vec<f64> {
    let h = problem.cfg.fd_step;
    let mut p = params.to_vec();
    (0..params.len())
        .map(|k| {
            let dk = h / problem.param_reach[k];
            let mut f = |m: f64| {
                p[k] = params[k] + m * dk;
                let v = problem.objective(i, &p, template, 1.0);
                p[k] = params[k];
                v
            };
            (-f(2.0) + 8.0 * f(1.0) - 8.0 * f(-1.0) + f(-2.0)) / (12.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn blob(shape: &[usize], center: &[f64], widths: &[f64]) -> ImageGrid {
        ImageGrid::from_fn(shape, |idx| {
            let r2: f64 = idx
                .iter()
                .zip(center)
                .zip(widths)
                .map(|((&i, c), w)| ((i as f64 - c) / w).powi(2))
                .sum();
            (-0.5 * r2).exp()
        })
        .unwrap()
    }

    #[test]
    fn rigid_matrices_are_rotations() {
        for angles in [vec![0.3], vec![-2.0]] {
            let t = Transform::rigid(angles, vec![1.0, 2.0]).unwrap();
            assert_abs_diff_eq!(t.det(), 1.0, epsilon = 1e-12);
        }
        let t = Transform::rigid(vec![0.2, -0.4, 1.1], vec![0.0; 3]).unwrap();
        let m = t.matrix();
        for r in 0..3 {
            for c in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k * 3 + r] * m[k * 3 + c]).sum();
                assert_abs_diff_eq!(dot, if r == c { 1.0 } else { 0.0 }, epsilon = 1e-12);
            }
        }
        assert_abs_diff_eq!(t.det(), 1.0, epsilon = 1e-12);
        let back = Transform::rigid(t.angles().to_vec(), vec![0.0; 3]).unwrap();
        let inv = t.inverse().unwrap();
        let round = inv.compose(&back).unwrap();
        for (k, v) in round.matrix().iter().enumerate() {
            assert_abs_diff_eq!(*v, if k % 4 == 0 { 1.0 } else { 0.0 }, epsilon = 1e-12);
        }
    }

    #[test]
    fn singular_affine_rejected() {
        assert!(matches!(
            Transform::affine(vec![1.0, 2.0, 2.0, 4.0], vec![0.0, 0.0]),
            Err(Error::InvalidTransform(_))
        ));
        assert!(Transform::from_params(TransformKind::Affine, 2, &[1.0; 3]).is_err());
    }

    #[test]
    fn inverse_round_trip() {
        let t = Transform::affine(vec![1.1, 0.2, -0.1, 0.9], vec![2.0, -1.0]).unwrap();
        let x = [3.0, -4.0];
        let y = t.apply(&x);
        let back = t.inverse().unwrap().apply(&y);
        assert_abs_diff_eq!(back[0], x[0], epsilon = 1e-12);
        assert_abs_diff_eq!(back[1], x[1], epsilon = 1e-12);
    }

    #[test]
    fn warp_identity_and_integer_shift() {
        let img = ImageGrid::from_fn(&[10, 12], |i| (i[0] * 12 + i[1]) as f64).unwrap();
        let id = Transform::identity(TransformKind::Affine, 2);
        assert_eq!(warp(&img, &id).unwrap(), img);
        let shift = Transform::affine(vec![1.0, 0.0, 0.0, 1.0], vec![3.0, 0.0]).unwrap();
        let out = warp(&img, &shift).unwrap();
        for r in 0..10 {
            for c in 0..12 {
                let expect = if r >= 3 { img.get(&[r - 3, c]) } else { 0.0 };
                assert_eq!(out.get(&[r, c]), expect);
            }
        }
    }

    #[test]
    fn warp_round_trip_on_smooth_blob() {
        let img = blob(&[40, 40], &[19.5, 18.0], &[5.0, 4.0]);
        let t = Transform::affine(vec![0.95, 0.1, -0.08, 1.05], vec![1.3, -0.7]).unwrap();
        let back = warp(&warp(&img, &t).unwrap(), &t.inverse().unwrap()).unwrap();
        for r in 6..34 {
            for c in 6..34 {
                assert!((back.get(&[r, c]) - img.get(&[r, c])).abs() < 0.02);
            }
        }
    }

    #[test]
    fn warp_rejects_dimension_mismatch() {
        let img = ImageGrid::zeros(&[4, 4]).unwrap();
        assert!(warp(&img, &Transform::identity(TransformKind::Rigid, 3)).is_err());
    }

    #[test]
    fn similarity_examples() {
        let a = ImageGrid::zeros(&[3, 3]).unwrap();
        let b = ImageGrid::filled(&[3, 3], 1.0).unwrap();
        assert_eq!(similarity(&a, &a, Norm::L2).unwrap(), 0.0);
        assert_eq!(similarity(&a, &b, Norm::L2).unwrap(), 9.0);
        assert_eq!(similarity(&a, &b, Norm::L1).unwrap(), 9.0);
        let p = ImageGrid::new(vec![1], vec![0.0]).unwrap();
        let q = ImageGrid::new(vec![1], vec![2.0]).unwrap();
        assert_eq!(similarity(&p, &q, Norm::L2).unwrap(), 4.0);
        assert_eq!(similarity(&p, &q, Norm::L1).unwrap(), 2.0);
        assert!(similarity(&a, &ImageGrid::zeros(&[9]).unwrap(), Norm::L1).is_err());
    }

    #[test]
    fn regularizer_examples() {
        assert_eq!(regularizer(&Transform::identity(TransformKind::Affine, 2)), 0.0);
        let t = Transform::affine(vec![1.0, 0.0, 0.0, 1.0], vec![3.0, 4.0]).unwrap();
        assert_eq!(regularizer(&t), 25.0);
        let r = Transform::rigid(vec![PI / 2.0], vec![0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(regularizer(&r), 4.0, epsilon = 1e-12);
        let phi = 0.3;
        let r = Transform::rigid(vec![phi], vec![0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(regularizer(&r), 4.0 * (1.0 - phi.cos()), epsilon = 1e-12);
    }

    #[test]
    fn weighted_median_matches_plain_median_for_unit_weights() {
        let mut p = vec![(4.0, 1.0), (1.0, 1.0), (3.0, 1.0), (2.0, 1.0)];
        assert_eq!(weighted_median(&mut p), 2.5);
        let mut p = vec![(4.0, 1.0), (1.0, 1.0), (3.0, 1.0)];
        assert_eq!(weighted_median(&mut p), 3.0);
        let mut p = vec![(0.0, 1.0), (10.0, 5.0)];
        assert_eq!(weighted_median(&mut p), 10.0);
    }

    #[test]
    fn identical_images_stay_at_identity() {
        let img = blob(&[24, 24], &[11.5, 11.5], &[4.0, 3.0]);
        let stack = ImageStack::new(vec![img.clone(), img.clone()]).unwrap();
        let cfg = RegistrationConfig { outer_iterations: 5, ..Default::default() };
        let res = groupwise_register(&stack, &cfg).unwrap();
        assert_eq!(res.energy_trace.last().unwrap().energy, 0.0);
        for t in &res.transforms {
            assert_eq!(t, &Transform::identity(TransformKind::Affine, 2));
        }
        assert_eq!(res.template, img);
    }

    #[test]
    fn rejects_single_image_and_bad_config() {
        let img = blob(&[8, 8], &[3.5, 3.5], &[2.0, 2.0]);
        let one = ImageStack::new(vec![img.clone()]).unwrap();
        assert!(groupwise_register(&one, &RegistrationConfig::default()).is_err());
        let two = ImageStack::new(vec![img.clone(), img]).unwrap();
        let bad = RegistrationConfig { lambda: -1.0, ..Default::default() };
        assert!(groupwise_register(&two, &bad).is_err());
    }

    #[test]
    fn template_update_is_optimal() {
        let mk = |s: f64| {
            let im = blob(&[12, 12], &[5.0 + s, 6.0], &[2.5, 2.0]);
            ImageState {
                transform: Transform::identity(TransformKind::Affine, 2),
                registered: im,
                scale: 1.0,
                step: 1.0,
            }
        };
        let states: Vec<ImageState> = [0.0, 0.7, -1.2, 2.1, 0.3].iter().map(|&s| mk(s)).collect();
        for norm in [Norm::L2, Norm::L1] {
            let t = update_template(&states, norm);
            let base: f64 = states.iter().map(|s| similarity(&s.registered, &t, norm).unwrap()).sum();
            let mut seed = 12345u64;
            for _ in 0..100 {
                seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
                let p = (seed >> 33) as usize % t.len();
                let delta = ((seed >> 20) % 1000) as f64 / 1000.0 - 0.5;
                let mut data = t.data().to_vec();
                data[p] += delta * 0.1;
                let pert = ImageGrid::new(t.shape().to_vec(), data).unwrap();
                let e: f64 = states.iter().map(|s| similarity(&s.registered, &pert, norm).unwrap()).sum();
                assert!(e >= base - 1e-12, "{norm}: perturbation lowered energy");
            }
        }
    }

    #[test]
    fn fd_gradient_agrees_with_five_point_stencil() {
        let a = blob(&[32, 32], &[15.0, 16.0], &[5.0, 3.5]);
        let b = blob(&[32, 32], &[16.2, 15.1], &[4.5, 3.8]);
        let stack = ImageStack::new(vec![a.clone(), b]).unwrap();
        for kind in [TransformKind::Affine, TransformKind::Rigid] {
            let cfg = RegistrationConfig { transform_kind: kind, lambda: 1e-3, ..Default::default() };
            let problem = Problem::new(&stack, &cfg);
            let params = match kind {
                TransformKind::Affine => vec![1.02, 0.03, -0.02, 0.98, 0.4, -0.3],
                TransformKind::Rigid => vec![0.05, 0.4, -0.3],
            };
            let g3 = problem.gradient(1, &params, &a, 1.0);
            let g5 = gradient_five_point(&problem, 1, &params, &a);
            let norm5 = g5.iter().map(|v| v * v).sum::<f64>().sqrt();
            let diff = g3.iter().zip(&g5).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            assert!(diff <= 0.01 * norm5, "{kind}: |g3 - g5| = {diff}, |g5| = {norm5}");
        }
    }

    #[test]
    fn upsampled_transform_matches_on_fine_grid() {
        let t = Transform::affine(vec![1.1, 0.1, -0.05, 0.95], vec![1.0, -0.5]).unwrap();
        let fine = [28usize, 28];
        let coarse = [14usize, 14];
        let up = upsample_transform(&t, &fine, &coarse).unwrap();
        // coarse pixel x' maps to fine pixel 2x'
        let xc = [3.0, 9.0];
        let cc = [(coarse[0] as f64 - 1.0) / 2.0, (coarse[1] as f64 - 1.0) / 2.0];
        let cf = [(fine[0] as f64 - 1.0) / 2.0, (fine[1] as f64 - 1.0) / 2.0];
        let yc = t.apply(&[xc[0] - cc[0], xc[1] - cc[1]]);
        let yf = up.apply(&[2.0 * xc[0] - cf[0], 2.0 * xc[1] - cf[1]]);
        for k in 0..2 {
            assert_abs_diff_eq!(2.0 * (yc[k] + cc[k]), yf[k] + cf[k], epsilon = 1e-12);
        }
    }
}

//! Scalar fields on regular pixel grids.
//!
//! Pixel centers sit at integer coordinates with unit spacing, so every
//! bandwidth and length in this crate is measured in pixels. Images are
//! extended by zero outside their domain.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{invalid, Result};

/// An n-dimensional (n in 1..=3) scalar image stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return invalid(format!("dimension must be 1, 2 or 3, got {}", shape.len()));
        }
        if shape.contains(&0) {
            return invalid(format!("zero-sized axis in shape {shape:?}"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return invalid(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return invalid("non-finite intensity");
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape.to_vec(), vec![0.0; len])
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; len])
    }

    /// Builds a grid by evaluating `f` at every pixel index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let len: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(len);
        for flat in 0..len {
            unravel_into(shape, flat, &mut idx);
            data.push(f(&idx));
        }
        Self::new(shape.to_vec(), data)
    }

    /// Crate-internal constructor for data produced by finite arithmetic on
    /// an already validated grid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(self.strides())
            .map(|(i, s)| i * s)
            .sum()
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn unravel(&self, flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        unravel_into(&self.shape, flat, &mut idx);
        idx
    }

    /// Coordinates of the geometric center, `(n - 1) / 2` along each axis.
    pub fn center(&self) -> Vec<f64> {
        self.shape.iter().map(|&n| (n as f64 - 1.0) / 2.0).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Multilinear interpolation at `point` (pixel units).
    ///
    /// Returns 0 when any coordinate lies outside the closed extent
    /// `[0, n - 1]` of its axis.
    pub fn sample_linear(&self, point: &[f64]) -> Result<f64> {
        if point.len() != self.dim() {
            return invalid(format!(
                "point has {} coordinates, grid has dimension {}",
                point.len(),
                self.dim()
            ));
        }
        if point.iter().any(|c| !c.is_finite()) {
            return invalid("non-finite sample coordinate");
        }
        Ok(self.sample_unchecked(point))
    }

    pub(crate) fn sample_unchecked(&self, point: &[f64]) -> f64 {
        let d = self.dim();
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        let mut stride = [0usize; 3];
        let mut s = 1;
        for axis in (0..d).rev() {
            stride[axis] = s;
            s *= self.shape[axis];
        }
        for axis in 0..d {
            let n = self.shape[axis];
            let x = point[axis];
            let upper = (n - 1) as f64;
            if !(0.0..=upper).contains(&x) {
                return 0.0;
            }
            if n == 1 {
                base[axis] = 0;
                frac[axis] = 0.0;
                continue;
            }
            let i = (x.floor() as usize).min(n - 2);
            base[axis] = i;
            frac[axis] = x - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut off = 0;
            for axis in 0..d {
                let hi = (corner >> axis) & 1 == 1;
                let f = frac[axis];
                if hi {
                    if f == 0.0 {
                        w = 0.0;
                        break;
                    }
                    w *= f;
                    off += (base[axis] + 1) * stride[axis];
                } else {
                    w *= 1.0 - f;
                    off += base[axis] * stride[axis];
                }
            }
            if w != 0.0 {
                acc += w * self.data[off];
            }
        }
        acc
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut out = vec![1; shape.len()];
    for axis in (0..shape.len().saturating_sub(1)).rev() {
        out[axis] = out[axis + 1] * shape[axis + 1];
    }
    out
}

pub(crate) fn unravel_into(shape: &[usize], mut flat: usize, idx: &mut [usize]) {
    for axis in (0..shape.len()).rev() {
        idx[axis] = flat % shape[axis];
        flat /= shape[axis];
    }
}

/// A non-empty collection of images sharing one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStack {
    images: Vec<ImageGrid>,
}

impl ImageStack {
    pub fn new(images: Vec<ImageGrid>) -> Result<Self> {
        let Some(first) = images.first() else {
            return invalid("image stack must not be empty");
        };
        let shape = first.shape().to_vec();
        if let Some(bad) = images.iter().find(|im| im.shape() != shape.as_slice()) {
            return invalid(format!(
                "stack members disagree on shape: {:?} vs {:?}",
                shape,
                bad.shape()
            ));
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    pub fn dim(&self) -> usize {
        self.images[0].dim()
    }

    pub fn pixel_count(&self) -> usize {
        self.images[0].len()
    }

    pub fn images(&self) -> &[ImageGrid] {
        &self.images
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ImageGrid> {
        self.images.iter()
    }

    pub fn into_images(self) -> Vec<ImageGrid> {
        self.images
    }

    /// Collects the values of every member at flat pixel index `flat`.
    pub(crate) fn pixel_values_into(&self, flat: usize, buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend(self.images.iter().map(|im| im.data[flat]));
    }

    pub fn pixelwise_mean(&self) -> ImageGrid {
        let n = self.len() as f64;
        let data = (0..self.pixel_count())
            .into_par_iter()
            .map(|p| self.images.iter().map(|im| im.data[p]).sum::<f64>() / n)
            .collect();
        ImageGrid::from_parts(self.shape().to_vec(), data)
    }

    /// Pixelwise median; for an even count the midpoint of the two central
    /// order statistics.
    pub fn pixelwise_median(&self) -> ImageGrid {
        let data = (0..self.pixel_count())
            .into_par_iter()
            .map_init(Vec::new, |buf, p| {
                self.pixel_values_into(p, buf);
                buf.sort_by(cmp_f64);
                median_sorted(buf)
            })
            .collect();
        ImageGrid::from_parts(self.shape().to_vec(), data)
    }
}

impl<'a> IntoIterator for &'a ImageStack {
    type Item = &'a ImageGrid;
    type IntoIter = std::slice::Iter<'a, ImageGrid>;

    fn into_iter(self) -> Self::IntoIter {
        self.images.iter()
    }
}

pub(crate) fn cmp_f64(a: &f64, b: &f64) -> Ordering {
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

pub(crate) fn median_sorted(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

fn check_probs(p0: f64, p1: f64) -> Result<()> {
    if !(p0 > 0.0 && p0 < p1 && p1 < 1.0) {
        return invalid(format!("probabilities must satisfy 0 < p0 < p1 < 1, got ({p0}, {p1})"));
    }
    Ok(())
}

/// Linear-interpolation quantile of already sorted values at position
/// `h = p (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let t = h - lo as f64;
    sorted[lo] + t * (sorted[hi] - sorted[lo])
}

/// Empirical `p0`- and `p1`-quantiles using linear interpolation between
/// order statistics.
pub fn quantile_pair(values: &[f64], p0: f64, p1: f64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return invalid("quantile of an empty sample");
    }
    check_probs(p0, p1)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(cmp_f64);
    Ok((quantile_sorted(&sorted, p0), quantile_sorted(&sorted, p1)))
}

/// Pixelwise `q1 - q0` across the stack.
pub fn pixelwise_quantile_range(stack: &ImageStack, p0: f64, p1: f64) -> Result<ImageGrid> {
    check_probs(p0, p1)?;
    let data = (0..stack.pixel_count())
        .into_par_iter()
        .map_init(Vec::new, |buf, p| {
            stack.pixel_values_into(p, buf);
            buf.sort_by(cmp_f64);
            // q1 >= q0 holds for sorted input; clamp guards against -0.0
            (quantile_sorted(buf, p1) - quantile_sorted(buf, p0)).max(0.0)
        })
        .collect();
    Ok(ImageGrid::from_parts(stack.shape().to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid2(rows: usize, cols: usize) -> ImageGrid {
        ImageGrid::from_fn(&[rows, cols], |i| (i[0] * 10 + i[1]) as f64 * 0.1 + 0.3).unwrap()
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(ImageGrid::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(ImageGrid::new(vec![], vec![]).is_err());
        assert!(ImageGrid::new(vec![1, 1, 1, 1], vec![0.0]).is_err());
        assert!(ImageGrid::new(vec![2], vec![0.0, f64::NAN]).is_err());
        assert!(ImageGrid::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn sample_at_nodes_returns_stored_values() {
        let g = grid2(4, 5);
        for r in 0..4 {
            for c in 0..5 {
                let v = g.sample_linear(&[r as f64, c as f64]).unwrap();
                assert_eq!(v, g.get(&[r, c]));
            }
        }
    }

    #[test]
    fn sample_outside_is_zero() {
        let g = grid2(4, 5);
        assert_eq!(g.sample_linear(&[-5.0, -5.0]).unwrap(), 0.0);
        assert_eq!(g.sample_linear(&[3.0001, 1.0]).unwrap(), 0.0);
        assert_eq!(g.sample_linear(&[1.0, -1e-12]).unwrap(), 0.0);
    }

    #[test]
    fn sample_midpoint_1d() {
        let g = ImageGrid::new(vec![2], vec![0.0, 1.0]).unwrap();
        assert_abs_diff_eq!(g.sample_linear(&[0.5]).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn sample_rejects_non_finite_and_wrong_arity() {
        let g = grid2(3, 3);
        assert!(g.sample_linear(&[f64::NAN, 0.0]).is_err());
        assert!(g.sample_linear(&[0.0]).is_err());
    }

    #[test]
    fn sample_continuous_across_cell_boundaries() {
        let g = ImageGrid::from_fn(&[5, 6, 4], |i| ((i[0] * 7 + i[1] * 3 + i[2]) % 5) as f64).unwrap();
        for axis in 0..3 {
            for k in 1..g.shape()[axis] - 1 {
                let mut p = vec![1.3, 2.6, 1.7];
                p[axis] = k as f64 - 1e-9;
                let a = g.sample_linear(&p).unwrap();
                p[axis] = k as f64 + 1e-9;
                let b = g.sample_linear(&p).unwrap();
                assert!((a - b).abs() < 1e-6, "axis {axis} boundary {k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(quantile_pair(&[2.5; 7], 0.1, 0.9).unwrap(), (2.5, 2.5));
        let v: Vec<f64> = (0..=10).map(f64::from).collect();
        let (q0, q1) = quantile_pair(&v, 0.1, 0.9).unwrap();
        assert_abs_diff_eq!(q0, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q1, 9.0, epsilon = 1e-12);
        let (q0, q1) = quantile_pair(&[3.0, 7.0], 0.25, 0.75).unwrap();
        assert_abs_diff_eq!(q0, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q1, 6.0, epsilon = 1e-12);
    }

    #[test]
    fn quantile_errors() {
        assert!(quantile_pair(&[], 0.1, 0.9).is_err());
        assert!(quantile_pair(&[1.0], 0.9, 0.1).is_err());
        assert!(quantile_pair(&[1.0], 0.5, 0.5).is_err());
        assert!(quantile_pair(&[1.0], 0.0, 0.5).is_err());
    }

    #[test]
    fn quantile_range_examples() {
        let a = ImageGrid::filled(&[3, 3], 0.0).unwrap();
        let b = ImageGrid::filled(&[3, 3], 1.0).unwrap();
        let same = ImageStack::new(vec![b.clone(), b.clone(), b.clone()]).unwrap();
        assert_eq!(pixelwise_quantile_range(&same, 0.1, 0.9).unwrap().max_abs(), 0.0);
        let pair = ImageStack::new(vec![a, b.clone()]).unwrap();
        let r = pixelwise_quantile_range(&pair, 0.1, 0.9).unwrap();
        for &v in r.data() {
            assert_abs_diff_eq!(v, 0.8, epsilon = 1e-12);
        }
        let single = ImageStack::new(vec![grid2(3, 4)]).unwrap();
        assert_eq!(pixelwise_quantile_range(&single, 0.1, 0.9).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn stack_rejects_empty_and_mixed_shapes() {
        assert!(ImageStack::new(vec![]).is_err());
        assert!(ImageStack::new(vec![grid2(2, 3), grid2(3, 2)]).is_err());
    }

    #[test]
    fn median_even_count_is_midpoint() {
        let s = ImageStack::new(vec![
            ImageGrid::filled(&[2], 1.0).unwrap(),
            ImageGrid::filled(&[2], 4.0).unwrap(),
            ImageGrid::filled(&[2], 2.0).unwrap(),
            ImageGrid::filled(&[2], 10.0).unwrap(),
        ])
        .unwrap();
        assert_eq!(s.pixelwise_median().data(), &[3.0, 3.0]);
        assert_eq!(s.pixelwise_mean().data(), &[4.25, 4.25]);
    }

    proptest! {
        #[test]
        fn quantiles_permutation_invariant(
            mut v in prop::collection::vec(-100.0f64..100.0, 1..40),
            seed in any::<u64>(),
        ) {
            let before = quantile_pair(&v, 0.1, 0.9).unwrap();
            // deterministic shuffle
            let n = v.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                v.swap(i, (s >> 33) as usize % (i + 1));
            }
            prop_assert_eq!(before, quantile_pair(&v, 0.1, 0.9).unwrap());
        }

        #[test]
        fn quantiles_positively_homogeneous(
            v in prop::collection::vec(-100.0f64..100.0, 1..40),
            c in 0.01f64..50.0,
            p0 in 0.01f64..0.49,
            p1 in 0.51f64..0.99,
        ) {
            let (a0, a1) = quantile_pair(&v, p0, p1).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
            let (b0, b1) = quantile_pair(&scaled, p0, p1).unwrap();
            prop_assert!((b0 - c * a0).abs() <= 1e-9 * (1.0 + c * a0.abs()));
            prop_assert!((b1 - c * a1).abs() <= 1e-9 * (1.0 + c * a1.abs()));
            prop_assert!(a0 <= a1);
        }

        #[test]
        fn quantile_range_nonnegative_and_zero_on_agreement(
            vals in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 1..6),
        ) {
            let mut images: Vec<ImageGrid> = vals
                .iter()
                .map(|v| ImageGrid::new(vec![2, 3], v.clone()).unwrap())
                .collect();
            // force agreement at pixel 0
            for im in &mut images {
                im.data[0] = 0.25;
            }
            let stack = ImageStack::new(images).unwrap();
            let r = pixelwise_quantile_range(&stack, 0.1, 0.9).unwrap();
            prop_assert!(r.data().iter().all(|&x| x >= 0.0));
            prop_assert_eq!(r.data()[0], 0.0);
        }
    }
}

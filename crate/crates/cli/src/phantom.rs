//! Synthetic 3D stacks: one fixed phantom, randomly affinely perturbed.

use tempres_core::model::NormalSampler;
use tempres_core::registration::Transform;
use tempres_core::{ImageGrid, Result};

/// Ellipsoid `sum ((p - c) / r)^2 <= 1`.
fn inside(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|k| ((p[k] - c[k]) / r[k]).powi(2)).sum::<f64>() <= 1.0
}

/// Phantom intensity at a point given in half-extent units (the volume spans
/// `[-1, 1]` per axis): a bright ellipsoid shell around a dimmer interior
/// with three empty cavities.
pub fn phantom_value(p: [f64; 3]) -> f64 {
    const OUTER: [f64; 3] = [0.8, 0.68, 0.6];
    const INNER: [f64; 3] = [0.64, 0.54, 0.46];
    const CAVITIES: [([f64; 3], [f64; 3]); 3] = [
        ([0.0, -0.05, 0.22], [0.16, 0.2, 0.12]),
        ([0.0, -0.05, -0.22], [0.16, 0.2, 0.12]),
        ([0.3, 0.22, 0.0], [0.1, 0.1, 0.1]),
    ];
    if !inside(p, [0.0; 3], OUTER) {
        0.0
    } else if !inside(p, [0.0; 3], INNER) {
        1.0
    } else if CAVITIES.iter().any(|&(c, r)| inside(p, c, r)) {
        0.0
    } else {
        0.5
    }
}

/// Samples `f(T^{-1} y)` on a `size^3` grid with 2x2x2 supersampling.
/// `T` acts on voxel coordinates relative to the volume center.
pub fn render_phantom(size: usize, t: &Transform) -> Result<ImageGrid> {
    let inv = t.inverse()?;
    let c = (size as f64 - 1.0) / 2.0;
    let half = size as f64 / 2.0;
    const SUB: [f64; 2] = [-0.25, 0.25];
    ImageGrid::from_fn(&[size, size, size], |i| {
        let mut acc = 0.0;
        for &d0 in &SUB {
            for &d1 in &SUB {
                for &d2 in &SUB {
                    let y = [i[0] as f64 + d0 - c, i[1] as f64 + d1 - c, i[2] as f64 + d2 - c];
                    let x = inv.apply(&y);
                    acc += phantom_value([x[0] / half, x[1] / half, x[2] / half]);
                }
            }
        }
        acc / 8.0
    })
}

/// Random perturbation `A = I + s G`, `b = s (size / 4) g` with standard
/// normal `G`, `g`.
pub fn random_perturbation(sampler: &mut NormalSampler, perturb: f64, size: usize) -> Result<Transform> {
    let mut matrix = vec![0.0; 9];
    for (k, m) in matrix.iter_mut().enumerate() {
        *m = if k % 4 == 0 { 1.0 } else { 0.0 } + perturb * sampler.standard();
    }
    let translation = (0..3).map(|_| perturb * size as f64 / 4.0 * sampler.standard()).collect();
    Transform::affine(matrix, translation)
}

/// `n` perturbed copies of the phantom together with the perturbations used.
pub fn synth_stack(n: usize, size: usize, perturb: f64, seed: u64) -> Result<Vec<(ImageGrid, Transform)>> {
    let mut sampler = NormalSampler::new(seed);
    let transforms = (0..n)
        .map(|_| random_perturbation(&mut sampler, perturb, size))
        .collect::<Result<Vec<_>>>()?;
    transforms
        .into_iter()
        .map(|t| Ok((render_phantom(size, &t)?, t)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phantom_has_all_levels() {
        let v = render_phantom(24, &Transform::affine(vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], vec![0.; 3]).unwrap()).unwrap();
        let d = v.data();
        assert!(d.contains(&1.0));
        assert!(d.contains(&0.5));
        assert_eq!(d[0], 0.0);
        assert_eq!(v.get(&[12, 12, 12]), 0.5);
    }

    #[test]
    fn zero_perturbation_gives_identical_copies() {
        let s = synth_stack(3, 12, 0.0, 9).unwrap();
        assert!(s.windows(2).all(|w| w[0].0 == w[1].0));
    }

    #[test]
    fn seeded_copies_differ_and_repeat() {
        let a = synth_stack(2, 12, 0.05, 1).unwrap();
        let b = synth_stack(2, 12, 0.05, 1).unwrap();
        assert_ne!(a[0].0, a[1].0);
        assert_eq!(a[1].0, b[1].0);
    }
}

use tempres_core::registration::{warp, EnergyRecord};
use tempres_core::{
    groupwise_register, ImageGrid, ImageStack, Norm, RegistrationConfig, Transform, TransformKind,
};

fn blobs(shape: &[usize], parts: &[([f64; 2], [f64; 2], f64)]) -> ImageGrid {
    ImageGrid::from_fn(shape, |i| {
        parts
            .iter()
            .map(|(c, w, h)| {
                let r2 = ((i[0] as f64 - c[0]) / w[0]).powi(2) + ((i[1] as f64 - c[1]) / w[1]).powi(2);
                h * (-0.5 * r2).exp()
            })
            .sum()
    })
    .unwrap()
}

fn test_image() -> ImageGrid {
    blobs(
        &[48, 48],
        &[
            ([23.5, 23.5], [7.0, 3.0], 1.0),
            ([17.0, 28.0], [2.5, 2.5], 0.7),
        ],
    )
}

fn assert_monotone(trace: &[EnergyRecord]) {
    for w in trace.windows(2) {
        assert!(
            w[1].energy <= w[0].energy + 1e-9,
            "energy rose from {} to {} at iteration {}",
            w[0].energy,
            w[1].energy,
            w[1].iteration
        );
    }
}

#[test]
fn recovers_translation() {
    let a = test_image();
    let shift = Transform::affine(vec![1.0, 0.0, 0.0, 1.0], vec![2.0, 0.0]).unwrap();
    let b = warp(&a, &shift).unwrap();
    let stack = ImageStack::new(vec![a, b]).unwrap();
    for norm in [Norm::L2, Norm::L1] {
        let cfg = RegistrationConfig {
            lambda: 1e-4,
            norm,
            ..Default::default()
        };
        let res = groupwise_register(&stack, &cfg).unwrap();
        assert_monotone(&res.energy_trace);
        let b0 = res.transforms[0].translation();
        let b1 = res.transforms[1].translation();
        let rel = [b0[0] - b1[0], b0[1] - b1[1]];
        assert!((rel[0] - 2.0).abs() < 0.5 && rel[1].abs() < 0.5, "{norm}: relative translation {rel:?}");
    }
}

#[test]
fn recovers_rotation_rigid() {
    let a = test_image();
    let angle = 10f64.to_radians();
    let rot = Transform::rigid(vec![angle], vec![0.0, 0.0]).unwrap();
    let b = warp(&a, &rot).unwrap();
    let stack = ImageStack::new(vec![a, b]).unwrap();
    let cfg = RegistrationConfig {
        transform_kind: TransformKind::Rigid,
        lambda: 1e-4,
        ..Default::default()
    };
    let res = groupwise_register(&stack, &cfg).unwrap();
    assert_monotone(&res.energy_trace);
    let rel = res.transforms[0].angles()[0] - res.transforms[1].angles()[0];
    assert!((rel - angle).abs().to_degrees() < 1.0, "relative angle {}°", rel.to_degrees());
}

#[test]
fn energy_trace_monotone_with_intensity_scales() {
    let base = test_image();
    let imgs: Vec<ImageGrid> = [(0.0, 1.0, 1.0), (1.5, -1.0, 0.8), (-1.0, 0.5, 1.3)]
        .iter()
        .map(|&(dy, dx, s)| {
            let t = Transform::affine(vec![1.0, 0.0, 0.0, 1.0], vec![dy, dx]).unwrap();
            warp(&base, &t).unwrap().map(|v| v * s)
        })
        .collect();
    let stack = ImageStack::new(imgs).unwrap();
    for norm in [Norm::L2, Norm::L1] {
        let cfg = RegistrationConfig {
            norm,
            fit_intensity_scale: true,
            outer_iterations: 15,
            ..Default::default()
        };
        let res = groupwise_register(&stack, &cfg).unwrap();
        assert_monotone(&res.energy_trace);
        assert!(res.intensity_scales.iter().all(|&c| c > 0.0));
        // relative scales recovered up to the common factor
        let r = res.intensity_scales[2] / res.intensity_scales[1];
        assert!((r - 1.3 / 0.8).abs() < 0.15, "{norm}: scale ratio {r}");
    }
}

#[test]
fn equivariant_under_common_integer_shift() {
    let base = blobs(&[48, 48], &[([22.0, 24.0], [5.0, 3.0], 1.0), ([18.0, 27.0], [2.0, 2.0], 0.6)]);
    let offsets = [(0.0, 0.0), (1.2, -0.8), (-0.6, 1.1)];
    let make = |pre: [f64; 2]| -> ImageStack {
        let imgs = offsets
            .iter()
            .map(|&(dy, dx)| {
                let t = Transform::affine(vec![1.0, 0.0, 0.0, 1.0], vec![dy + pre[0], dx + pre[1]]).unwrap();
                warp(&base, &t).unwrap()
            })
            .collect();
        ImageStack::new(imgs).unwrap()
    };
    let v = [2usize, 4usize];
    let plain = make([0.0, 0.0]);
    let shifted = make([v[0] as f64, v[1] as f64]);
    let cfg = RegistrationConfig {
        lambda: 0.0,
        outer_iterations: 20,
        ..Default::default()
    };
    let ra = groupwise_register(&plain, &cfg).unwrap();
    let rb = groupwise_register(&shifted, &cfg).unwrap();
    for (ta, tb) in ra.transforms.iter().zip(&rb.transforms) {
        for (x, y) in ta.translation().iter().zip(tb.translation()) {
            assert!((x - y).abs() < 0.05, "translations differ: {x} vs {y}");
        }
    }
    // registered stacks agree after undoing the common shift
    for (a, b) in ra.registered.iter().zip(rb.registered.iter()) {
        for r in 8..40 {
            for c in 8..40 {
                let d = (a.get(&[r, c]) - b.get(&[r + v[0], c + v[1]])).abs();
                assert!(d < 0.02, "pixel ({r},{c}) differs by {d}");
            }
        }
    }
}

#[test]
fn three_dimensional_registration_runs() {
    let base = ImageGrid::from_fn(&[20, 20, 20], |i| {
        let r2 = ((i[0] as f64 - 9.5) / 4.0).powi(2) + ((i[1] as f64 - 9.5) / 3.0).powi(2) + ((i[2] as f64 - 9.5) / 5.0).powi(2);
        (-0.5 * r2).exp()
    })
    .unwrap();
    let t = Transform::rigid(vec![0.0, 0.0, 0.0], vec![1.0, 0.0, -1.0]).unwrap();
    let stack = ImageStack::new(vec![base.clone(), warp(&base, &t).unwrap()]).unwrap();
    let cfg = RegistrationConfig {
        transform_kind: TransformKind::Rigid,
        outer_iterations: 15,
        ..Default::default()
    };
    let res = groupwise_register(&stack, &cfg).unwrap();
    assert_monotone(&res.energy_trace);
    let b0 = res.transforms[0].translation();
    let b1 = res.transforms[1].translation();
    assert!((b0[0] - b1[0] - 1.0).abs() < 0.3);
    assert!((b0[2] - b1[2] + 1.0).abs() < 0.3);
}

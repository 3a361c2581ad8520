use tempres_core::viz::{overlay_from_gradient, render_heatmap, render_overlay_svg, template_gradient, VIRIDIS_ANCHORS};
use tempres_core::{build_overlay, BarOverlay, ImageGrid, OverlayOptions, SliceSpec};

fn ring(n: usize) -> ImageGrid {
    ImageGrid::from_fn(&[n, n], |i| {
        let r = ((i[0] as f64 - 9.3).powi(2) + (i[1] as f64 - 11.1).powi(2)).sqrt();
        (-(r - 5.0).powi(2) / 4.0).exp()
    })
    .unwrap()
}

fn lines(svg: &str) -> Vec<[f64; 4]> {
    let doc = roxmltree::Document::parse(svg).expect("well-formed SVG");
    doc.descendants()
        .filter(|n| n.has_tag_name("line"))
        .map(|n| {
            let a = |k: &str| n.attribute(k).unwrap().parse::<f64>().unwrap();
            [a("x1"), a("y1"), a("x2"), a("y2")]
        })
        .collect()
}

#[test]
fn empty_overlay_has_background_and_legend_only() {
    let t = ring(20);
    let o = BarOverlay { bars: vec![], slice: None, plane_shape: [20, 20] };
    let svg = render_overlay_svg(&t, &o, None).unwrap();
    assert!(lines(&svg).is_empty());
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.descendants().filter(|n| n.has_tag_name("image")).count(), 1);
    assert!(doc.descendants().any(|n| n.attribute("id") == Some("legend")));
}

#[test]
fn one_bar_has_length_two_sigma() {
    let mut s = vec![0.0; 9];
    s[4] = 2.5;
    let sigma = ImageGrid::new(vec![3, 3], s).unwrap();
    let g0 = ImageGrid::filled(&[3, 3], -1.0).unwrap();
    let g1 = ImageGrid::filled(&[3, 3], 2.0).unwrap();
    let o = overlay_from_gradient(&[g0, g1], &sigma, 1e-9, 1, None).unwrap();
    let svg = render_overlay_svg(&ImageGrid::filled(&[3, 3], 0.5).unwrap(), &o, Some((0.0, 5.0))).unwrap();
    let ls = lines(&svg);
    assert_eq!(ls.len(), 1);
    let [x1, y1, x2, y2] = ls[0];
    assert!(((x2 - x1).hypot(y2 - y1) - 5.0).abs() < 1e-6);
    assert!(((x1 + x2) / 2.0 - 1.0).abs() < 1e-12 && ((y1 + y2) / 2.0 - 1.0).abs() < 1e-12);
}

#[test]
fn every_rendered_bar_is_two_sigma_long() {
    let t = ring(24);
    let sigma = t.map(|v| (3.0 * v * 4.0).round() / 4.0);
    let o = build_overlay(&t, &sigma, &OverlayOptions::default()).unwrap();
    assert!(!o.bars.is_empty());
    let sampled_positive = (0..24)
        .step_by(2)
        .flat_map(|r| (0..24).step_by(2).map(move |c| (r, c)))
        .filter(|&(r, c)| sigma.get(&[r, c]) > 0.0)
        .count();
    assert!(o.bars.len() <= sampled_positive);
    let svg = render_overlay_svg(&t, &o, None).unwrap();
    let ls = lines(&svg);
    assert_eq!(ls.len(), o.bars.len());
    for (l, bar) in ls.iter().zip(&o.bars) {
        let len = (l[2] - l[0]).hypot(l[3] - l[1]);
        assert!((len - 2.0 * bar.half_length).abs() < 1e-6);
    }
}

#[test]
fn rotating_inputs_rotates_bars() {
    let n = 21;
    let t = ring(n);
    let sigma = ImageGrid::filled(&[n, n], 1.0).unwrap();
    // rot90: new(r, c) = old(c, n - 1 - r)
    let rot = |g: &ImageGrid| ImageGrid::from_fn(&[n, n], |i| g.get(&[i[1], n - 1 - i[0]])).unwrap();
    let opts = OverlayOptions { stride: Some(1), eps_grad: Some(1e-6), ..Default::default() };
    let a = build_overlay(&t, &sigma, &opts).unwrap();
    let b = build_overlay(&rot(&t), &rot(&sigma), &opts).unwrap();
    assert_eq!(a.bars.len(), b.bars.len());
    for bar in &a.bars {
        let [r, c] = bar.center;
        let center = [(n - 1) as f64 - c, r];
        let other = b.bars.iter().find(|x| x.center == center).expect("matching bar");
        // direction (dr, dc) maps to (-dc, dr)
        assert!((other.direction[0] + bar.direction[1]).abs() < 1e-9);
        assert!((other.direction[1] - bar.direction[0]).abs() < 1e-9);
    }
}

#[test]
fn slice_overlay_on_volume() {
    let v = ImageGrid::from_fn(&[10, 12, 14], |i| {
        let r2 = (i[0] as f64 - 4.5).powi(2) + (i[1] as f64 - 5.5).powi(2) + (i[2] as f64 - 6.5).powi(2);
        (-r2 / 10.0).exp()
    })
    .unwrap();
    let sigma = ImageGrid::filled(&[10, 12, 14], 1.0).unwrap();
    let opts = OverlayOptions { slice: Some(SliceSpec { axis: 0, index: 4 }), ..Default::default() };
    let o = build_overlay(&v, &sigma, &opts).unwrap();
    assert_eq!(o.plane_shape, [12, 14]);
    assert!(!o.bars.is_empty());
    let grad = template_gradient(&v, 1.0).unwrap();
    assert_eq!(grad.len(), 3);
    let png = render_heatmap(&v, opts.slice).unwrap();
    assert_eq!(&png[1..4], b"PNG");
}

fn decode_png(bytes: &[u8]) -> (u32, u32, Vec<u8>) {
    let dec = png::Decoder::new(std::io::Cursor::new(bytes));
    let mut reader = dec.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (info.width, info.height, buf)
}

#[test]
fn heatmap_colors_and_shape() {
    let c = ImageGrid::filled(&[4, 6], 3.0).unwrap();
    let (w, h, px) = decode_png(&render_heatmap(&c, None).unwrap());
    assert_eq!((w, h), (6, 4));
    assert!(px.chunks(3).all(|p| p == px[..3].to_vec().as_slice()));

    let two = ImageGrid::from_fn(&[5, 5], |i| if (i[0] + i[1]) % 2 == 0 { 1.0 } else { 7.0 }).unwrap();
    let bytes = render_heatmap(&two, None).unwrap();
    assert_eq!(bytes, render_heatmap(&two, None).unwrap());
    let (_, _, px) = decode_png(&bytes);
    for p in px.chunks(3) {
        assert!(p == VIRIDIS_ANCHORS[0] || p == VIRIDIS_ANCHORS[9]);
    }
    assert!(render_heatmap(&ImageGrid::zeros(&[2, 2, 2]).unwrap(), None).is_err());
}

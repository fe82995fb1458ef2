use footprint_core::ingest::*;
use footprint_core::labels::{encode_labels, LabelMode};
use footprint_core::raster::{MultibandRaster, Raster};
use proptest::prelude::*;

fn rect(id: i32, x0: f64, y0: f64, x1: f64, y1: f64) -> Footprint {
    Footprint {
        id,
        ring: vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)],
    }
}

/// Pixel centers `i + 0.5` inside `[a, b)`, clipped to `[0, n)`.
fn centers(a: f64, b: f64, n: usize) -> usize {
    (0..n).filter(|&i| a <= i as f64 + 0.5 && (i as f64 + 0.5) < b).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn rectangle_area_matches_closed_form(x0 in -5.0f64..25.0, y0 in -5.0f64..25.0, w in 0.0f64..15.0, h in 0.0f64..15.0) {
        let set = FootprintSet::new(vec![rect(1, x0, y0, x0 + w, y0 + h)]).unwrap();
        let r = rasterize(&set, 20, 20);
        let area = r.data().iter().filter(|&&v| v == 1).count();
        prop_assert_eq!(area, centers(x0, x0 + w, 20) * centers(y0, y0 + h, 20));
    }

    #[test]
    fn ring_orientation_does_not_matter(x0 in 0.0f64..10.0, y0 in 0.0f64..10.0, w in 1.0f64..8.0, h in 1.0f64..8.0) {
        let cw = rect(1, x0, y0, x0 + w, y0 + h);
        let mut ccw = cw.clone();
        ccw.ring.reverse();
        prop_assert_eq!(
            rasterize(&FootprintSet::new(vec![cw]).unwrap(), 20, 20),
            rasterize(&FootprintSet::new(vec![ccw]).unwrap(), 20, 20)
        );
    }

    #[test]
    fn planted_shifts_are_recovered(
        rects in proptest::collection::vec((0usize..30, 0usize..30, 4usize..12, 4usize..12), 2..6),
        dx in -5i32..=5, dy in -5i32..=5,
    ) {
        let mut m = Raster::filled(40, 40, 0u8);
        for (x0, y0, w, h) in rects {
            for y in y0..(y0 + h).min(40) {
                for x in x0..(x0 + w).min(40) {
                    m.set(x, y, 1);
                }
            }
        }
        prop_assume!(m.data().iter().filter(|&&v| v == 1).count() * 20 >= m.len());
        let reference = shift_mask(&m, dx, dy);
        let a = auto_align(&m, &reference, DEFAULT_MAX_SHIFT).unwrap();
        prop_assert_eq!((a.dx, a.dy), (dx, dy));
    }

    #[test]
    fn ndvi_filter_is_monotone(values in proptest::collection::vec(-1.0f32..1.0, 4), t1 in -1.0f32..1.0, t2 in -1.0f32..1.0) {
        let set = FootprintSet::new((0..4).map(|i| rect(i + 1, i as f64 * 5.0, 0.0, i as f64 * 5.0 + 4.0, 4.0)).collect()).unwrap();
        let ndvi = Raster::from_fn(20, 5, |x, _| values[(x / 5).min(3)]);
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let strict = filter_by_ndvi(&set, &ndvi, lo).unwrap();
        let loose = filter_by_ndvi(&set, &ndvi, hi).unwrap();
        prop_assert!(loose.dropped.len() <= strict.dropped.len());
        prop_assert!(loose.dropped.iter().all(|id| strict.dropped.contains(id)));
    }
}

#[test]
fn footprint_file_feeds_chip_extraction() {
    let dir = tempfile::tempdir().unwrap();
    let fp_path = dir.path().join("roofs.txt");
    std::fs::write(&fp_path, "1, 10 10 30 10 30 25 10 25 10 10\n2, 50 40 70 40 70 60 50 60 50 40\n").unwrap();
    let set = FootprintSet::read(&fp_path).unwrap();
    let ids = rasterize(&set, 100, 80);
    let mask = ids.map(|v| (v > 0) as u8);
    let labels = encode_labels(&mask, LabelMode::Distance).unwrap();
    let bands = (0..3).map(|b| Raster::from_fn(100, 80, |x, y| ((x * 3 + y + b) % 256) as u8)).collect();
    let image = MultibandRaster::from_bands(bands).unwrap();
    let cfg = ChipConfig { chip: 32, count: 6, seed: 9, negative_fraction: Some(0.5), ..Default::default() };
    let manifest = extract_chips(&image, &labels, &cfg, dir.path().join("chips")).unwrap();
    manifest.write(dir.path().join("chips/manifest.csv")).unwrap();
    let back = ChipManifest::read(dir.path().join("chips/manifest.csv")).unwrap();
    assert_eq!(back, manifest);
    for r in &back.records {
        let (_, l) = load_chip(r, dir.path().join("chips"), LabelMode::Distance).unwrap();
        let has_building = l.building_mask().data().iter().any(|&v| v == 1);
        assert_eq!(has_building, r.polarity == Polarity::Positive);
    }
}

use footprint_core::labels::*;
use footprint_core::raster::Raster;
use proptest::prelude::*;

fn mask_strategy() -> impl Strategy<Value = Raster<u8>> {
    (2usize..20, 2usize..20)
        .prop_flat_map(|(w, h)| proptest::collection::vec(0u8..2, w * h).prop_map(move |d| Raster::new(w, h, d).unwrap()))
        .prop_filter("needs both classes", |m| {
            let ones = m.data().iter().filter(|&&v| v == 1).count();
            ones > 0 && ones < m.len()
        })
}

fn brute_squared(m: &Raster<u8>) -> Vec<f64> {
    let b = boundary_pixels(m);
    let (w, h) = m.dims();
    let sites: Vec<(i64, i64)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .filter(|&(x, y)| b.get(x, y) == 1)
        .map(|(x, y)| (x as i64, y as i64))
        .collect();
    (0..h as i64)
        .flat_map(|y| (0..w as i64).map(move |x| (x, y)))
        .map(|(x, y)| sites.iter().map(|&(sx, sy)| ((sx - x).pow(2) + (sy - y).pow(2)) as f64).fold(f64::MAX, f64::min))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn squared_distances_are_exact(m in mask_strategy()) {
        prop_assert_eq!(squared_distance_to(&boundary_pixels(&m)), brute_squared(&m));
    }

    #[test]
    fn sign_follows_the_mask(m in mask_strategy()) {
        let d = signed_distance_transform(&m).unwrap();
        prop_assert!(d.degenerate.is_none());
        for (&v, &b) in d.field.data().iter().zip(m.data()) {
            let ok = if b == 1 { v >= 0.0 } else { v <= -1.0 };
            prop_assert!(ok);
        }
    }

    #[test]
    fn round_trip(m in mask_strategy()) {
        let labels = encode_labels(&m, LabelMode::Distance).unwrap();
        prop_assert!(labels.raster().data().iter().all(|&y| (1..=128).contains(&y)));
        prop_assert_eq!(decode_labels(&labels).unwrap(), m.clone());
        let bin = encode_labels(&m, LabelMode::Binary).unwrap();
        prop_assert_eq!(bin.building_mask(), m);
    }
}

#[test]
fn touching_rectangles_keep_their_seam() {
    // Two rectangles sharing an edge form one region; one pixel apart they stay two.
    for gap in 0..4 {
        let mut m = Raster::filled(30, 10, 0u8);
        for y in 2..8 {
            for x in (2..12).chain(12 + gap..26) {
                m.set(x, y, 1);
            }
        }
        let labels = encode_labels(&m, LabelMode::Distance).unwrap();
        assert_eq!(decode_labels(&labels).unwrap(), m);
        for x in 12..12 + gap {
            assert!(labels.get(x, 4) <= 63);
        }
    }
}

#[test]
fn degenerate_masks_saturate() {
    let all = Raster::filled(5, 5, 1u8);
    assert!(quantize_distance(&signed_distance_transform(&all).unwrap()).is_err());
    assert!(distance_labels(&all).unwrap().raster().data().iter().all(|&y| y == 128));
    let none = Raster::filled(5, 5, 0u8);
    assert!(distance_labels(&none).unwrap().raster().data().iter().all(|&y| y == 1));
}

use footprint_core::net::{DecoderKind, Model, NetworkSpec};
use footprint_core::raster::{MultibandRaster, Raster};
use footprint_core::tiling::{plan_tiles, tiled_infer, JobConfig};
use footprint_core::fusion::fuse_equal;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn model(classes: usize, decoder: DecoderKind, seed: u64) -> Model {
    let spec = NetworkSpec::encoder_decoder(3, 4, 3, classes, decoder);
    Model::init(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn image(w: usize, h: usize, seed: u64) -> MultibandRaster<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bands = (0..3).map(|_| Raster::from_fn(w, h, |_, _| rng.gen())).collect();
    MultibandRaster::from_bands(bands).unwrap()
}

#[test]
fn large_image_matches_whole_image_inference() {
    let m = model(2, DecoderKind::IndexUnpool, 1);
    let img = image(600, 700, 2);
    let whole = m.infer(&img).unwrap();
    let radius = m.spec().receptive_radius().unwrap();
    let one = tiled_infer(&JobConfig { workers: 1, tile: 160, halo: Some(radius) }, std::slice::from_ref(&m), &img).unwrap();
    let four = tiled_infer(&JobConfig { workers: 4, tile: 160, halo: Some(radius) }, std::slice::from_ref(&m), &img).unwrap();
    assert_eq!(one.probs, whole);
    assert_eq!(four.probs, whole);
    assert_eq!(one.labels, four.labels);
    assert!(one.plan.tiles.len() > 1);
    assert!(one.throughput.pixels_per_second > 0.0);
}

#[test]
fn fused_tiles_match_fused_whole_image() {
    let a = model(128, DecoderKind::TransposedConv, 3);
    let b = model(128, DecoderKind::IndexUnpool, 4);
    let img = image(83, 71, 5);
    let whole = fuse_equal(&a.infer(&img).unwrap(), &b.infer(&img).unwrap()).unwrap();
    let out = tiled_infer(&JobConfig { workers: 2, tile: 64, halo: None }, &[a, b], &img).unwrap();
    assert_eq!(out.probs, whole);
}

#[test]
fn mismatched_models_are_rejected() {
    let a = model(2, DecoderKind::IndexUnpool, 1);
    let b = model(128, DecoderKind::IndexUnpool, 1);
    assert!(tiled_infer(&JobConfig::default(), &[a.clone(), b], &image(16, 16, 1)).is_err());
    assert!(tiled_infer(&JobConfig::default(), &[a.clone(), a.clone(), a], &image(16, 16, 1)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_sizes_stitch_exactly(w in 1usize..90, h in 1usize..90, tile in 56usize..120, workers in 1usize..4) {
        let m = model(2, DecoderKind::IndexUnpool, 7);
        let img = image(w, h, (w * 1000 + h) as u64);
        let out = tiled_infer(&JobConfig { workers, tile, halo: None }, std::slice::from_ref(&m), &img).unwrap();
        prop_assert_eq!(out.probs, m.infer(&img).unwrap());
    }

    #[test]
    fn interiors_partition(w in 1usize..300, h in 1usize..300, halo in 0usize..20, extra in 1usize..100) {
        let plan = plan_tiles(w, h, 2 * halo + extra, halo).unwrap();
        let mut hits = vec![0u8; w * h];
        for t in &plan.tiles {
            for y in t.interior.y0..t.interior.y0 + t.interior.height {
                for x in t.interior.x0..t.interior.x0 + t.interior.width {
                    hits[y * w + x] += 1;
                }
            }
        }
        prop_assert!(hits.iter().all(|&c| c == 1));
    }
}

use footprint_core::labels::{encode_labels, LabelMode};
use footprint_core::net::*;
use footprint_core::raster::MultibandRaster;
use footprint_core::synth::{random_scene, rgb_bands, SceneConfig};
use footprint_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus(n: usize, size: usize, mode: LabelMode, seed: u64) -> Vec<TrainingChip> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let s = random_scene(&SceneConfig::chip(size), &mut rng);
            let img = s.image.select(&rgb_bands()).unwrap();
            TrainingChip {
                image: MultibandRaster::new(img.bands().iter().map(|b| b.map(|v| v as f32)).collect(), rgb_bands()).unwrap(),
                labels: encode_labels(&s.mask, mode).unwrap(),
            }
        })
        .collect()
}

fn small_spec(classes: usize, decoder: DecoderKind) -> NetworkSpec {
    NetworkSpec::encoder_decoder(3, 8, 2, classes, decoder)
}

fn flat_params(m: &Model) -> Vec<f32> {
    m.params()
        .iter()
        .flatten()
        .flat_map(|p| p.weight.data().iter().chain(&p.bias).copied().collect::<Vec<_>>())
        .collect()
}

#[test]
fn same_seed_gives_identical_weights() {
    let chips = corpus(6, 32, LabelMode::Distance, 1);
    let cfg = TrainConfig { iterations: 15, learning_rate: 0.01, ..Default::default() };
    for decoder in [DecoderKind::IndexUnpool, DecoderKind::TransposedConv] {
        let a = train(small_spec(128, decoder), &chips, &cfg).unwrap();
        let b = train(small_spec(128, decoder), &chips, &cfg).unwrap();
        assert_eq!(flat_params(&a.model), flat_params(&b.model));
        assert_eq!(a.losses, b.losses);
        let c = train(small_spec(128, decoder), &chips, &TrainConfig { seed: 1, ..cfg.clone() }).unwrap();
        assert_ne!(flat_params(&a.model), flat_params(&c.model));
    }
}

#[test]
fn training_descends() {
    let chips = corpus(10, 32, LabelMode::Binary, 2);
    let cfg = TrainConfig { iterations: 200, learning_rate: 0.02, ..Default::default() };
    let out = train(small_spec(2, DecoderKind::IndexUnpool), &chips, &cfg).unwrap();
    assert!(out.losses.last().unwrap() < &out.losses[0], "{:?}", (out.losses[0], out.losses.last()));
}

#[test]
fn fixed_batch_loss_decreases_early() {
    let chips = corpus(3, 32, LabelMode::Distance, 3);
    let cfg = TrainConfig { iterations: 10, learning_rate: 1e-3, batch_size: 3, ..Default::default() };
    let out = train(small_spec(128, DecoderKind::TransposedConv), &chips, &cfg).unwrap();
    for w in out.losses.windows(2) {
        assert!(w[1] < w[0], "{:?}", out.losses);
    }
}

#[test]
fn zero_learning_rate_keeps_weights() {
    let chips = corpus(3, 16, LabelMode::Binary, 4);
    let cfg = TrainConfig { iterations: 5, learning_rate: 0.0, ..Default::default() };
    let trained = train(small_spec(2, DecoderKind::IndexUnpool), &chips, &cfg).unwrap();
    let fresh = train(small_spec(2, DecoderKind::IndexUnpool), &chips, &TrainConfig { iterations: 0, ..cfg }).unwrap();
    assert_eq!(flat_params(&trained.model), flat_params(&fresh.model));
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let chips = corpus(3, 16, LabelMode::Distance, 5);
    let cfg = TrainConfig { iterations: 200, learning_rate: 1e6, ..Default::default() };
    match train(small_spec(128, DecoderKind::IndexUnpool), &chips, &cfg) {
        Err(Error::Divergence { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.losses)),
    }
}

#[test]
fn label_mode_must_match_network() {
    let chips = corpus(2, 16, LabelMode::Binary, 6);
    let cfg = TrainConfig { iterations: 1, ..Default::default() };
    assert!(matches!(train(small_spec(128, DecoderKind::IndexUnpool), &chips, &cfg), Err(Error::Config(_))));
}

#[test]
fn checkpoint_preserves_inference() {
    let chips = corpus(3, 16, LabelMode::Distance, 7);
    let out = train(small_spec(128, DecoderKind::TransposedConv), &chips, &TrainConfig { iterations: 3, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_model(&out.model, &path).unwrap();
    let back = load_model(&path).unwrap();
    assert_eq!(back.infer(&chips[0].image).unwrap(), out.model.infer(&chips[0].image).unwrap());
    assert_eq!(back.input_bands(), out.model.input_bands());
}

fn tensor(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conv_and_transposed_conv_are_adjoint(
        n in 1usize..3, ci in 1usize..4, co in 1usize..4, k in 1usize..4, s in 1usize..3,
        ho in 1usize..5, wo in 1usize..5, seed in any::<u64>(),
    ) {
        let (h, w) = ((ho - 1) * s + k, (wo - 1) * s + k);
        let x = tensor([n, ci, h, w], seed);
        let y = tensor([n, co, ho, wo], seed ^ 1);
        let wt = tensor([co, ci, k, k], seed ^ 2);
        let lhs = conv2d_forward(&x, &wt, None, s, 0).unwrap().dot(&y);
        let rhs = x.dot(&transposed_conv_forward(&y, &wt, s).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn unpool_is_the_adjoint_of_gather(n in 1usize..3, c in 1usize..3, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let x = tensor([n, c, 2 * h, 2 * w], seed);
        let (y, idx) = maxpool_with_indices(&x, 2, 2).unwrap();
        let g = tensor(y.shape(), seed ^ 3);
        let up = unpool_by_indices(&g, &idx, x.shape()).unwrap();
        // <pool(x) at indices, g> == <x, unpool(g)>
        prop_assert!((y.dot(&g) - x.dot(&up)).abs() < 1e-10);
        prop_assert_eq!(maxpool_backward(&g, &idx).unwrap(), up);
    }

    #[test]
    fn softmax_rows_are_stochastic(k in 1usize..9, seed in any::<u64>()) {
        let z = tensor([1, k, 3, 4], seed).map(|v| v * 50.0);
        let p = softmax_channels(&z);
        for i in 0..12 {
            let s: f64 = (0..k).map(|c| p.plane(0, c)[i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

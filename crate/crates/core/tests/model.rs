use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmm_core::model::{
    activation_map, gate_apply, Binder, BnMode, DualPath, Group, ModelConfig, PathConfig, PoolMode,
};
use xmm_core::tensor::{Tape, Tensor};

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn full_paths_map_to_expected_extents() {
    assert_eq!(PathConfig::vision_full().output_shape(384, 128).unwrap(), (12, 4, 2048));
    assert_eq!(PathConfig::text_full(768).output_shape(1, 120).unwrap(), (1, 30, 2048));
    assert_eq!(PathConfig::vision_full().downsampling(), (32, 32));
    assert_eq!(PathConfig::text_full(300).downsampling(), (1, 4));
    let full = ModelConfig::full(768, 11003);
    full.validate().unwrap();
    assert_eq!(full.descriptor_dim(), 2048);
}

#[test]
fn desk_paths_map_to_expected_extents() {
    for len in [40, 60, 80, 100, 120] {
        assert_eq!(PathConfig::text_desk(50).output_shape(1, len).unwrap(), (1, len / 4, 64));
    }
    assert_eq!(PathConfig::vision_desk().output_shape(96, 32).unwrap(), (3, 1, 64));
    assert!(PathConfig::vision_desk().output_shape(90, 32).is_err());
    assert!(PathConfig::text_desk(50).output_shape(1, 42).is_err());
}

#[test]
fn forward_maps_agree_with_static_shapes() {
    let (model, store) = DualPath::new(ModelConfig::desk(12, 5), 0).unwrap();
    let mut tape = Tape::new();
    let mut b = Binder::frozen(&mut tape, &store);
    let img = b.tape.constant(random(&[2, 96, 32, 3], 1));
    let map = model.vision_map(&mut b, img, BnMode::Eval).unwrap();
    assert_eq!(b.tape.shape(map), [2, 3, 1, 64]);
    let txt = b.tape.constant(random(&[3, 1, 40, 12], 2));
    let map = model.text_map(&mut b, txt, BnMode::Eval).unwrap();
    assert_eq!(b.tape.shape(map), [3, 1, 10, 64]);
}

#[test]
fn same_seed_same_weights() {
    let (_, a) = DualPath::new(ModelConfig::desk(8, 4), 3).unwrap();
    let (_, b) = DualPath::new(ModelConfig::desk(8, 4), 3).unwrap();
    let (_, c) = DualPath::new(ModelConfig::desk(8, 4), 4).unwrap();
    let names = ["vision.stem.weight", "text_gate.w1", "classifier"];
    for n in names {
        assert_eq!(a.by_name(n), b.by_name(n));
        assert_ne!(a.by_name(n), c.by_name(n));
    }
}

/// Without the gated block, the descriptor is exactly the max-pooled map
/// through the linear head.
#[test]
fn gmp_without_gate_composes_pool_and_head() {
    let mut cfg = ModelConfig::desk(10, 4);
    cfg.gated = false;
    let (model, store) = DualPath::new(cfg, 7).unwrap();
    assert!(model.vision_gate().is_none() && store.id("vision_gate.w1").is_none());
    let mut tape = Tape::new();
    let mut b = Binder::frozen(&mut tape, &store);
    let x = b.tape.constant(random(&[2, 96, 32, 3], 5));
    let map = model.vision_map(&mut b, x, BnMode::Eval).unwrap();
    let desc = model.encode_images(&mut b, x, BnMode::Eval).unwrap();
    let (map, desc) = (b.tape.value(map).clone(), b.tape.value(desc).clone());
    let w = store.get(model.vision_head().weight);
    let bias = store.get(model.vision_head().bias);
    let (c, spatial) = (64, 3);
    for n in 0..2 {
        let pooled: Vec<f32> = (0..c)
            .map(|ch| (0..spatial).map(|s| map.data()[(n * spatial + s) * c + ch]).fold(f32::MIN, f32::max))
            .collect();
        for o in 0..c {
            let expected: f32 = bias.data()[o] + (0..c).map(|i| pooled[i] * w.data()[i * c + o]).sum::<f32>();
            assert!((desc.data()[n * c + o] - expected).abs() <= 1e-4 * (1.0 + expected.abs()));
        }
    }
}

#[test]
fn both_pooling_doubles_head_input() {
    let mut cfg = ModelConfig::desk(10, 4);
    cfg.pool = PoolMode::Both;
    let (model, store) = DualPath::new(cfg, 1).unwrap();
    assert_eq!(store.get(model.text_head().weight).shape(), [128, 64]);
    assert_eq!(store.by_name("text_gate.w1").unwrap().shape(), [8, 128]);
    let d = model.embed_text(&store, &random(&[2, 1, 40, 10], 3), 2).unwrap();
    assert_eq!(d.shape(), [2, 64]);
}

#[test]
fn chunked_inference_matches_whole_batch() {
    let (model, store) = DualPath::new(ModelConfig::desk(6, 3), 2).unwrap();
    let imgs = random(&[5, 96, 32, 3], 8);
    let a = model.embed_images(&store, &imgs, 5).unwrap();
    let b = model.embed_images(&store, &imgs, 2).unwrap();
    assert_eq!(a.shape(), [5, 64]);
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= 1e-5 * (1.0 + x.abs()));
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = ModelConfig::desk(8, 4);
    cfg.text.stages[3].width = 32;
    assert!(cfg.validate().is_err());
    let mut cfg = ModelConfig::desk(8, 4);
    cfg.reduction = 5;
    assert!(cfg.validate().is_err());
    cfg.gated = false;
    cfg.validate().unwrap();
    let mut cfg = ModelConfig::desk(8, 4);
    cfg.text.stem.max_pool = true;
    assert!(cfg.validate().is_err());
    let mut cfg = ModelConfig::desk(8, 4);
    cfg.num_classes = 0;
    assert!(cfg.validate().is_err());
    let mut cfg = ModelConfig::desk(8, 4);
    cfg.vision.kernel = (2, 3);
    assert!(cfg.validate().is_err());
}

#[test]
fn tensor_names_map_to_groups_and_stages() {
    assert_eq!(DualPath::group_of("vision.stage2.block0.conv1.weight"), Group::VisionBackbone);
    assert_eq!(DualPath::group_of("text.stem.weight"), Group::TextBackbone);
    assert_eq!(DualPath::group_of("vision_gate.w1"), Group::Heads);
    assert_eq!(DualPath::group_of("text_head.bias"), Group::Heads);
    assert_eq!(DualPath::group_of("classifier"), Group::Classifier);
    assert_eq!(DualPath::vision_stage_of("vision.stem.bn.gamma"), Some(0));
    assert_eq!(DualPath::vision_stage_of("vision.stage4.block0.conv2.weight"), Some(4));
    assert_eq!(DualPath::vision_stage_of("text.stage4.block0.conv2.weight"), None);
}

#[test]
fn activation_map_examples() {
    // Two positions with absolute channel sums 3 and 4 normalize to 0.6, 0.8.
    let m = Tensor::new(vec![1, 2, 2], vec![1.0, -2.0, 0.0, 4.0]).unwrap();
    let a = activation_map(&m).unwrap();
    assert_eq!(a.shape(), [1, 2]);
    assert!((a.data()[0] - 0.6).abs() < 1e-6 && (a.data()[1] - 0.8).abs() < 1e-6);
    let z = activation_map(&Tensor::zeros(vec![1, 3, 2, 4])).unwrap();
    assert_eq!(z.shape(), [3, 2]);
    assert!(z.data().iter().all(|&v| v == 0.0));
    assert!(activation_map(&Tensor::zeros(vec![2, 3, 2, 4])).is_err());
}

#[test]
fn gate_rejects_mismatched_weights() {
    let mut tape = Tape::<f64>::new();
    let f = tape.constant(Tensor::zeros(vec![2, 8]));
    let w1 = tape.constant(Tensor::zeros(vec![2, 8]));
    let w2 = tape.constant(Tensor::zeros(vec![8, 3]));
    assert!(gate_apply(&mut tape, f, w1, w2).is_err());
}

proptest! {
    /// The gate multiplies each feature by a factor in (0, 1): signs are
    /// kept and magnitudes never grow. Zero second-layer weights give
    /// exactly half the input.
    #[test]
    fn gate_scales_features_into_unit_interval(seed in any::<u64>(), n in 1usize..6, h in 1usize..4) {
        let d = 4 * h;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand = |shape: &[usize]| Tensor::<f64>::from_fn(shape.to_vec(), |_| rng.gen_range(-3.0..3.0));
        let (f, w1, w2) = (rand(&[n, d]), rand(&[h, d]), rand(&[d, h]));
        let mut tape = Tape::<f64>::new();
        let (fv, w1v, w2v) = (tape.constant(f.clone()), tape.constant(w1), tape.constant(w2));
        let y = gate_apply(&mut tape, fv, w1v, w2v).unwrap();
        for (&yi, &fi) in tape.value(y).data().iter().zip(f.data()) {
            prop_assert!(yi.abs() <= fi.abs());
            prop_assert!(yi * fi >= 0.0);
        }
        let zero = tape.constant(Tensor::zeros(vec![d, h]));
        let y = gate_apply(&mut tape, fv, w1v, zero).unwrap();
        for (&yi, &fi) in tape.value(y).data().iter().zip(f.data()) {
            prop_assert!((yi - fi / 2.0).abs() <= 1e-12);
        }
    }

    /// Activation maps have unit norm and ignore the sign and global scale
    /// of the features.
    #[test]
    fn activation_map_is_normalized(seed in any::<u64>(), h in 1usize..6, w in 1usize..6, s in 0.1f32..10.0) {
        let m = random(&[h, w, 5], seed);
        let a = activation_map(&m).unwrap();
        let norm: f32 = a.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-5);
        let scaled = activation_map(&m.map(|v| -s * v)).unwrap();
        for (x, y) in a.data().iter().zip(scaled.data()) {
            prop_assert!((x - y).abs() < 1e-5);
        }
    }
}

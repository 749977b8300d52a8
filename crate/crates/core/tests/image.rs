use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xmm_core::image::{
    apply_augment, augment_batch, denormalize, hflip, normalize, pad_crop, resize, stack, AugmentConfig, AugmentDraw,
    ChannelStats, Image,
};

fn random_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

/// Pixels quantized to 8 bits, so a binary PPM round trip is exact.
fn quantized_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(h, w, (0..h * w * 3).map(|_| rng.gen_range(0u8..=255) as f32 / 255.0).collect()).unwrap()
}

#[test]
fn ppm_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ppm");
    let img = quantized_image(7, 5, 1);
    img.write_ppm(&path).unwrap();
    assert_eq!(Image::read_ppm(&path).unwrap(), img);
}

#[test]
fn ppm_header_with_comments_and_plain_format() {
    let plain = b"P3\n# comment\n2 1\n255\n255 0 0  0 0 255\n";
    let img = Image::decode_ppm(plain).unwrap();
    assert_eq!((img.height(), img.width()), (1, 2));
    assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
    assert_eq!(img.pixel(0, 1), [0.0, 0.0, 1.0]);
    assert!(Image::decode_ppm(b"P5\n1 1\n255\n\0").is_err());
}

#[test]
fn resize_upsample_two_pixels() {
    // Half-pixel centres: a 1×2 image stretched to 1×4 interpolates at
    // positions -0.25, 0.25, 0.75, 1.25 (clamped to the ends).
    let img = Image::new(1, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    let big = resize(&img, (1, 4)).unwrap();
    let reds: Vec<f32> = (0..4).map(|x| big.pixel(0, x)[0]).collect();
    assert_eq!(reds, [0.0, 0.25, 0.75, 1.0]);
}

#[test]
fn resize_downsample_averages_pairs() {
    let img = Image::new(1, 4, [0.0, 0.2, 0.6, 1.0].iter().flat_map(|&v| [v; 3]).collect()).unwrap();
    let small = resize(&img, (1, 2)).unwrap();
    assert!((small.pixel(0, 0)[1] - 0.1).abs() < 1e-6);
    assert!((small.pixel(0, 1)[1] - 0.8).abs() < 1e-6);
}

#[test]
fn channel_stats_of_two_flat_images() {
    let a = Image::filled(2, 2, [0.0, 0.5, 1.0]);
    let b = Image::filled(2, 2, [1.0, 0.5, 0.0]);
    let s = ChannelStats::compute(&[a, b]).unwrap();
    assert_eq!(s.mean, [0.5, 0.5, 0.5]);
    assert!((s.std[0] - 0.5).abs() < 1e-6);
    assert!(s.std[1] > 0.0 && s.std[1] < 1e-5);
    assert_eq!(ChannelStats::from_text(&s.to_text()).unwrap(), s);
}

#[test]
fn augment_batch_is_deterministic_and_keyed_per_sample() {
    let imgs: Vec<Image> = (0..6).map(|i| random_image(12, 8, i)).collect();
    let refs: Vec<&Image> = imgs.iter().collect();
    let cfg = AugmentConfig {
        pad: 3,
        ..AugmentConfig::default()
    };
    let keys: Vec<u64> = (0..6).collect();
    let a = augment_batch(&refs, &keys, &cfg, 9, 2).unwrap();
    let b = augment_batch(&refs, &keys, &cfg, 9, 2).unwrap();
    assert_eq!(a, b);
    // Sample 3 alone with the same key draws the same augmentation.
    let alone = augment_batch(&refs[3..4], &keys[3..4], &cfg, 9, 2).unwrap();
    assert_eq!(alone[0], a[3]);
    let other_epoch = augment_batch(&refs, &keys, &cfg, 9, 3).unwrap();
    assert_ne!(a, other_epoch);
}

#[test]
fn stack_lays_out_nhwc() {
    let a = Image::filled(2, 3, [0.1, 0.2, 0.3]);
    let b = Image::filled(2, 3, [0.4, 0.5, 0.6]);
    let t = stack(&[a, b]).unwrap();
    assert_eq!(t.shape(), [2, 2, 3, 3]);
    assert_eq!(t.data()[18..21], [0.4, 0.5, 0.6]);
    assert!(stack(&[Image::filled(2, 3, [0.0; 3]), Image::filled(3, 2, [0.0; 3])]).is_err());
}

proptest! {
    #[test]
    fn normalize_then_denormalize_is_identity(
        seed in any::<u64>(),
        mean in prop::array::uniform3(-1.0f32..1.0),
        std in prop::array::uniform3(0.05f32..3.0),
    ) {
        let img = random_image(5, 4, seed);
        let stats = ChannelStats { mean, std };
        let back = denormalize(&normalize(&img, &stats), &stats);
        for (a, b) in back.data().iter().zip(img.data()) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn hflip_is_an_involution(seed in any::<u64>(), h in 1usize..10, w in 1usize..10) {
        let img = random_image(h, w, seed);
        prop_assert_eq!(hflip(&hflip(&img)), img.clone());
        prop_assert_eq!(hflip(&img).pixel(0, 0), img.pixel(0, w - 1));
    }

    /// Every crop keeps the image size; the unshifted crop is the identity,
    /// and every non-zero output pixel comes from the shifted source.
    #[test]
    fn pad_crop_shifts_content(seed in any::<u64>(), pad in 0usize..5, dy in 0usize..10, dx in 0usize..10) {
        let img = random_image(8, 6, seed);
        let (top, left) = (dy.min(2 * pad), dx.min(2 * pad));
        let out = pad_crop(&img, pad, top, left).unwrap();
        prop_assert_eq!((out.height(), out.width()), (8, 6));
        prop_assert_eq!(pad_crop(&img, pad, pad, pad).unwrap(), img.clone());
        for y in 0..8 {
            for x in 0..6 {
                let sy = (y + top) as isize - pad as isize;
                let sx = (x + left) as isize - pad as isize;
                let expected = if (0..8).contains(&sy) && (0..6).contains(&sx) {
                    img.pixel(sy as usize, sx as usize)
                } else {
                    [0.0; 3]
                };
                prop_assert_eq!(out.pixel(y, x), expected);
            }
        }
    }

    #[test]
    fn ppm_bytes_round_trip(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let img = quantized_image(h, w, seed);
        prop_assert_eq!(Image::decode_ppm(&img.encode_ppm()).unwrap(), img);
    }

    /// Resizing keeps values inside the source range.
    #[test]
    fn resize_stays_in_range(seed in any::<u64>(), h in 1usize..20, w in 1usize..20) {
        let img = random_image(7, 5, seed);
        let (lo, hi) = img.data().iter().fold((f32::MAX, f32::MIN), |(l, u), &v| (l.min(v), u.max(v)));
        let out = resize(&img, (h, w)).unwrap();
        prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
    }

    /// Applying a draw equals crop, optional flip and normalization by hand.
    #[test]
    fn apply_augment_composes_steps(seed in any::<u64>(), top in 0usize..7, left in 0usize..7, flip in any::<bool>()) {
        let img = random_image(9, 5, seed);
        let cfg = AugmentConfig {
            pad: 3,
            hflip_prob: 0.5,
            stats: ChannelStats { mean: [0.4, 0.5, 0.6], std: [0.2, 0.25, 0.3] },
        };
        let out = apply_augment(&img, &cfg, AugmentDraw { top, left, flip }).unwrap();
        let cropped = pad_crop(&img, 3, top, left).unwrap();
        let flipped = if flip { hflip(&cropped) } else { cropped };
        prop_assert_eq!(out, normalize(&flipped, &cfg.stats));
    }
}

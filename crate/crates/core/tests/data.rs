use diffseg::data::*;
use diffseg::diffusion::ClassLabel;
use diffseg::metrics::evaluate;
use diffseg::{BinaryMask, Error, Image, RngStream};
use proptest::prelude::*;

fn clean_spec() -> SyntheticSpec {
    SyntheticSpec {
        image_size: 32,
        skin_jitter: 0.0,
        skin_variation: 0.0,
        lesion_jitter: 0.0,
        lesion_texture: 0.0,
        pixel_noise: 0.0,
        hair_rate: 0.0,
        bubble_rate: 0.0,
        seed: 12,
        ..SyntheticSpec::default()
    }
}

fn mask_image(mask: &BinaryMask) -> Image {
    let data = mask.data().iter().flat_map(|&v| [v as f32; 3]).collect();
    Image::new(mask.width(), mask.height(), 3, data).unwrap()
}

#[test]
fn mask_is_exactly_the_rendered_lesion() {
    let spec = clean_spec();
    for s in synthesize(&spec, 6).unwrap() {
        let lesion = spec.lesion_color.map(|c| c as f32);
        for y in 0..32 {
            for x in 0..32 {
                let px = s.image.pixel(x, y);
                let is_lesion = px.iter().zip(&lesion).all(|(a, b)| a == b);
                assert_eq!(is_lesion, s.mask.get(x, y), "({x},{y})");
            }
        }
        assert_eq!(s.label, ClassLabel::Unhealthy);
        assert!(!s.mask.is_empty());
    }
}

#[test]
fn batch_generation_equals_per_index_generation() {
    let spec = SyntheticSpec { image_size: 16, seed: 4, ..SyntheticSpec::default() };
    let all = synthesize(&spec, 5).unwrap();
    for (i, s) in all.iter().enumerate() {
        let one = synthesize_one(&spec, i as u64).unwrap();
        assert_eq!(one.image, s.image);
        assert_eq!(one.mask, s.mask);
    }
    assert!(matches!(synthesize(&spec, 0), Err(Error::Input(_))));
    let bad = SyntheticSpec { hair_rate: 1.5, ..spec };
    assert!(matches!(synthesize(&bad, 1), Err(Error::Config(_))));
}

#[test]
fn counterfactuals_are_healthy_and_unmasked() {
    let spec = SyntheticSpec { image_size: 32, seed: 8, ..SyntheticSpec::default() };
    for s in synthesize(&spec, 4).unwrap() {
        let h = healthy_counterfactual(&s).unwrap();
        assert_eq!(h.label, ClassLabel::Healthy);
        assert!(h.mask.is_empty());
        for y in 0..32 {
            for x in 0..32 {
                if !s.mask.get(x, y) {
                    assert_eq!(h.image.pixel(x, y), s.image.pixel(x, y));
                }
            }
        }
    }
}

#[test]
fn blur_leaves_ground_truth_intact() {
    let spec = SyntheticSpec { image_size: 32, seed: 2, ..SyntheticSpec::default() };
    let s = synthesize_one(&spec, 0).unwrap();
    let cfg = AugmentConfig { blur_p: 1.0, rotate_p: 0.0, sharpen_p: 0.0, ..AugmentConfig::default() };
    let (img, m) = augment(&s.image, &s.mask, &cfg, &mut RngStream::new(1)).unwrap();
    assert_ne!(img, s.image);
    assert_eq!(evaluate(&m, &s.mask).unwrap().dice, 1.0);
}

#[test]
fn dataset_layout_round_trips() {
    let spec = SyntheticSpec { image_size: 16, seed: 6, ..SyntheticSpec::default() };
    let ds = SynthDataset::generate(&spec, 3, 2, 2).unwrap();
    assert_eq!(ds.split(Split::Train).len(), 6);
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    for split in [Split::Train, Split::Val, Split::Test] {
        let back = read_split(dir.path(), split).unwrap();
        assert_eq!(back.len(), ds.split(split).len());
        for (e, s) in back.iter().zip(ds.split(split)) {
            assert_eq!(e.sample.mask, s.mask);
            assert_eq!(e.sample.label, s.label);
        }
        assert!(dir.path().join(split.name()).join("images").is_dir());
    }
    assert!(dir.path().join("labels.csv").is_file());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rotations_keep_image_and_mask_aligned(
        seed in any::<u64>(),
        cx in 6usize..10,
        cy in 6usize..10,
        r in 1.0f64..3.5,
        arbitrary in any::<bool>(),
    ) {
        let mask = BinaryMask::from_fn(16, 16, |x, y| {
            ((x as f64 - cx as f64).powi(2) + (y as f64 - cy as f64).powi(2)).sqrt() <= r
        });
        let cfg = AugmentConfig { rotate_p: 1.0, arbitrary_rotation: arbitrary, ..AugmentConfig::none() };
        let (img, m) = augment(&mask_image(&mask), &mask, &cfg, &mut RngStream::new(seed)).unwrap();
        let redrawn = BinaryMask::new(16, 16, (0..256).map(|i| img.data()[i * 3] as u8).collect()).unwrap();
        prop_assert_eq!(evaluate(&redrawn, &m).unwrap().dice, 1.0);
        if !arbitrary {
            prop_assert_eq!(m.area(), mask.area());
        }
    }

    #[test]
    fn generator_is_deterministic(seed in any::<u64>(), index in 0u64..1000) {
        let spec = SyntheticSpec { image_size: 12, seed, semi_axis: [0.1, 0.2], ..SyntheticSpec::default() };
        let a = synthesize_one(&spec, index).unwrap();
        let b = synthesize_one(&spec, index).unwrap();
        prop_assert_eq!(&a.image, &b.image);
        prop_assert_eq!(&a.mask, &b.mask);
        prop_assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn quarter_turns_compose_to_identity(seed in any::<u64>(), q in 0usize..4) {
        let mut rng = RngStream::new(seed);
        let mask = BinaryMask::new(5, 7, (0..35).map(|_| rng.bernoulli(0.4) as u8).collect()).unwrap();
        let img = mask_image(&mask);
        let (i1, m1) = rotate_quarter(&img, &mask, q);
        let (i2, m2) = rotate_quarter(&i1, &m1, 4 - q);
        prop_assert_eq!(m2, mask);
        prop_assert_eq!(i2, img);
    }
}

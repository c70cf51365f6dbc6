use diffseg::diffseg::*;
use diffseg::diffusion::{build_schedule, ConditionalModel};
use diffseg::nn::{Architecture, DenoiserNet, Init};
use diffseg::{Error, Image, RealMap, RngStream};
use proptest::prelude::*;

fn arch(class_conditioned: bool) -> Architecture {
    Architecture {
        emb_dim: 8,
        channels: vec![4, 8],
        norm_groups: 2,
        class_conditioned,
        ..Architecture::default()
    }
}

fn live(class_conditioned: bool, seed: u64) -> DenoiserNet<f32> {
    DenoiserNet::with_init(arch(class_conditioned), seed, Init { zero_output: false }).unwrap()
}

fn image(seed: u64) -> Image {
    let mut rng = RngStream::new(seed);
    Image::new(8, 8, 3, (0..192).map(|_| rng.uniform(0.0, 1.0) as f32).collect()).unwrap()
}

fn map(values: Vec<f64>) -> DiffMap {
    let n = values.len();
    DiffMap { values: RealMap::new(n, 1, values).unwrap(), timestep: 1 }
}

/// Exhaustive Otsu: maximise w0·w1·(μ0−μ1)² over every split of a 256-bin
/// histogram; ties resolve to the middle of the tied range.
fn otsu_oracle(values: &[f64]) -> f64 {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / 256.0;
    let bin = |v: f64| (((v - lo) / width) as usize).min(255);
    let mut scores = vec![f64::NEG_INFINITY; 256];
    for k in 1..256 {
        let (a, b): (Vec<usize>, Vec<usize>) = values.iter().map(|&v| bin(v)).partition(|&i| i < k);
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let mean = |s: &[usize]| s.iter().sum::<usize>() as f64 / s.len() as f64;
        scores[k] = a.len() as f64 * b.len() as f64 * (mean(&a) - mean(&b)).powi(2);
    }
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..256).filter(|&k| (scores[k] - top).abs() <= 1e-9 * top).collect();
    lo + (tied[0] + tied[tied.len() - 1]) as f64 / 2.0 * width
}

#[test]
fn twin_nets_give_zero_difference_from_one_draw() {
    let net = live(false, 3);
    let model = ConditionalModel::dual(net.clone(), net).unwrap();
    let s = build_schedule(100, 1e-4, 0.02).unwrap();
    let mut rng = RngStream::new(1);
    let d = noise_difference(&model, &image(2), 40, &s, &mut rng).unwrap();
    assert_eq!(rng.draws(), 1);
    assert!(d.values.data().iter().all(|&v| v == 0.0));
    assert_eq!(d.timestep, 40);
}

#[test]
fn corrupt_model_is_a_model_error() {
    let mut net = live(true, 3);
    net.params_mut().iter_mut().for_each(|p| *p = f32::NAN);
    let model = ConditionalModel::embedding(net).unwrap();
    let s = build_schedule(100, 1e-4, 0.02).unwrap();
    let r = noise_difference(&model, &image(2), 40, &s, &mut RngStream::new(1));
    assert!(matches!(r, Err(Error::Model(_))));
}

#[test]
fn otsu_on_bimodal_map_matches_exhaustive_search() {
    let mut rng = RngStream::new(12);
    let values: Vec<f64> = (0..4000)
        .map(|i| if i % 2 == 0 { 0.2 } else { 0.8 } + 0.05 * rng.normal())
        .map(|v: f64| v.clamp(0.0, 1.0))
        .collect();
    let t = otsu_threshold(&values);
    assert!((0.4..=0.6).contains(&t), "{t}");
    assert!((t - otsu_oracle(&values)).abs() < 1e-12);
    let b = binarize(&map(values), &BinarizePolicy { threshold: Threshold::Otsu, normalize: false }).unwrap();
    assert!((b.delta - t).abs() < 1e-12);
    assert_eq!(b.mask.area(), 2000);
}

#[test]
fn fixed_threshold_boundary_and_zero_map() {
    let b = binarize(&map(vec![0.0, 0.5, 1.0]), &BinarizePolicy::default()).unwrap();
    assert_eq!(b.mask.data(), &[0, 1, 1]);
    let b = binarize(&map(vec![0.0; 5]), &BinarizePolicy::default()).unwrap();
    assert!(b.mask.is_empty());
    let raw = BinarizePolicy { threshold: Threshold::Fixed(0.1), normalize: false };
    assert!(binarize(&map(vec![0.0; 5]), &raw).unwrap().mask.is_empty());
}

#[test]
fn single_timestep_ensemble_is_one_difference_and_threshold() {
    let model = ConditionalModel::embedding(live(true, 8)).unwrap();
    let s = build_schedule(150, 1e-4, 0.02).unwrap();
    let img = image(5);
    let opts = EnsembleOptions::default();
    let (ens, maps) = generate_ensemble(&model, &img, "img", &[80], &opts, &s, 77).unwrap();
    let d = noise_difference(&model, &img, 80, &s, &mut RngStream::substream(77, 80)).unwrap();
    let b = binarize(&d, &opts.policy).unwrap();
    assert_eq!(ens.len(), 1);
    assert_eq!(ens.members()[0].mask, b.mask);
    assert_eq!(maps[0], d);
}

#[test]
fn members_do_not_depend_on_the_rest_of_the_list() {
    let model = ConditionalModel::embedding(live(true, 8)).unwrap();
    let s = build_schedule(150, 1e-4, 0.02).unwrap();
    let img = image(6);
    let opts = EnsembleOptions { smooth_sigma: Some(1.0), ..EnsembleOptions::default() };
    let (full, _) = generate_ensemble(&model, &img, "a", &default_timesteps(), &opts, &s, 3).unwrap();
    let (part, _) = generate_ensemble(&model, &img, "a", &[90, 150], &opts, &s, 3).unwrap();
    assert_eq!(full.len(), 10);
    assert_eq!(full.timesteps(), default_timesteps());
    assert_eq!(part.members()[0], full.members()[3]);
    assert_eq!(part.members()[1], full.members()[9]);
    assert!(full.masks().iter().all(|m| m.same_shape(full.masks()[0])));
}

#[test]
fn bad_timestep_lists_are_input_errors() {
    let model = ConditionalModel::embedding(live(true, 8)).unwrap();
    let s = build_schedule(150, 1e-4, 0.02).unwrap();
    let img = image(6);
    let opts = EnsembleOptions::default();
    for ts in [vec![], vec![60, 60], vec![70, 60], vec![60, 151]] {
        let r = generate_ensemble(&model, &img, "a", &ts, &opts, &s, 3);
        assert!(matches!(r, Err(Error::Input(_))), "{ts:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantile_binarization_ignores_monotone_rescaling(
        vals in proptest::collection::vec(0.0f64..5.0, 2..60),
        q in 0.0f64..1.0,
        scale in 0.1f64..10.0,
        shift in -3.0f64..3.0,
    ) {
        let policy = BinarizePolicy { threshold: Threshold::Quantile(q), normalize: true };
        let a = binarize(&map(vals.clone()), &policy).unwrap();
        let warped: Vec<f64> = vals.iter().map(|v| (scale * v).exp() + shift).collect();
        let b = binarize(&map(warped), &policy).unwrap();
        prop_assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn fixed_threshold_is_elementwise(vals in proptest::collection::vec(0.0f64..1.0, 1..50), delta in 0.0f64..1.0) {
        let policy = BinarizePolicy { threshold: Threshold::Fixed(delta), normalize: false };
        let b = binarize(&map(vals.clone()), &policy).unwrap();
        for (v, m) in vals.iter().zip(b.mask.data()) {
            prop_assert_eq!(*m == 1, *v >= delta);
        }
    }
}

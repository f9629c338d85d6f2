use super::*;
use crate::metrics::Measure;
use crate::raster::RgbImage;
use crate::slide::MemorySource;
use num_rational::BigRational;
use num_traits::{FromPrimitive, ToPrimitive, Zero};
use proptest::prelude::*;
use rand::Rng;

const P: u32 = PATCH_SIZE as u32;

fn pyramid(id: &str, w: u32, h: u32) -> SlidePyramid {
    MemorySource::new(id, RgbImage::filled(w, h, [200, 120, 180]), 20.0, 256).into_pyramid()
}

/// Counts cancer pixels per grid cell on an explicitly resampled mask.
fn brute_force(mask: &GrayImage, base: u32, mag: u32) -> Vec<(u32, u32)> {
    let k = base / mag;
    let (gw, gh) = (mask.width / k, mask.height / k);
    let resampled: Vec<u8> = (0..gh)
        .flat_map(|y| (0..gw).map(move |x| (y, x)))
        .map(|(y, x)| mask.get((2 * x + 1) * k / 2, (2 * y + 1) * k / 2))
        .collect();
    let mut out = Vec::new();
    for row in 0..gh / P {
        for col in 0..gw / P {
            let mut n = 0u64;
            for y in row * P..(row + 1) * P {
                for x in col * P..(col + 1) * P {
                    n += resampled[(y * gw + x) as usize] as u64;
                }
            }
            if 2 * n > (P * P) as u64 {
                out.push((col * P, row * P));
            }
        }
    }
    out
}

fn random_blob_mask(seed: u64, w: u32, h: u32) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = GrayImage::filled(w, h, 0);
    for _ in 0..rng.gen_range(1..6) {
        let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let r = rng.gen_range(50.0..700.0);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy < r * r {
                    m.set(x, y, 1);
                }
            }
        }
    }
    m
}

#[test]
fn all_cancer_896_gives_sixteen_patches_at_20x() {
    let slide = pyramid("s", 896, 896);
    let set = extract_cancer_patches(&slide, &GrayImage::filled(896, 896, 1), Magnification::X20, MutationStatus::Brca)
        .unwrap();
    assert_eq!(set.len(), 16);
    assert_eq!(set.patches[0], (0, 0));
    assert_eq!(set.patches[15], (672, 672));
    assert!(!set.subsampled);
    let five = extract_cancer_patches(&slide, &GrayImage::filled(896, 896, 1), Magnification::X5, MutationStatus::Brca)
        .unwrap();
    assert_eq!(five.len(), 1);
}

#[test]
fn exactly_half_is_excluded_and_one_more_pixel_includes() {
    let mut mask = GrayImage::filled(P, P, 0);
    let half = (P * P / 2) as usize;
    mask.data[..half].fill(1);
    assert!(cancer_patch_origins(&mask, 20.0, 20.0, P).unwrap().is_empty());
    mask.data[half] = 1;
    assert_eq!(cancer_patch_origins(&mask, 20.0, 20.0, P).unwrap(), vec![(0, 0)]);
    mask.data[0] = 0;
    assert!(cancer_patch_origins(&mask, 20.0, 20.0, P).unwrap().is_empty());
}

#[test]
fn nearest_neighbour_reads_the_centre_pixel_of_each_block() {
    // At 5× every patch pixel reads base pixel 4X + 2: a mask set only on
    // those columns is all cancer at 5×, and one set only on 4X + 1 is empty.
    let mut centres = GrayImage::filled(4 * P, 4 * P, 0);
    let mut offsets = GrayImage::filled(4 * P, 4 * P, 0);
    for y in 0..4 * P {
        for x in 0..4 * P {
            if x % 4 == 2 && y % 4 == 2 {
                centres.set(x, y, 1);
            }
            if x % 4 == 1 {
                offsets.set(x, y, 1);
            }
        }
    }
    assert_eq!(cancer_patch_origins(&centres, 20.0, 5.0, P).unwrap(), vec![(0, 0)]);
    assert!(cancer_patch_origins(&offsets, 20.0, 5.0, P).unwrap().is_empty());
}

#[test]
fn inclusion_matches_brute_force_on_blob_masks() {
    for seed in 0..4 {
        let mask = random_blob_mask(seed, 1400, 1000);
        for mag in [20u32, 10, 5] {
            let got = cancer_patch_origins(&mask, 20.0, mag as f64, P).unwrap();
            assert_eq!(got, brute_force(&mask, 20, mag), "seed {seed} at {mag}x");
        }
    }
}

#[test]
fn extraction_edge_cases() {
    let slide = pyramid("s", 500, 300);
    let empty = extract_cancer_patches(&slide, &GrayImage::filled(500, 300, 0), Magnification::X20, MutationStatus::NonBrca)
        .unwrap();
    assert!(empty.is_empty());
    assert!(extract_cancer_patches(&slide, &GrayImage::filled(400, 300, 1), Magnification::X20, MutationStatus::Brca).is_err());
    assert!(extract_cancer_patches(&slide, &GrayImage::filled(500, 300, 2), Magnification::X20, MutationStatus::Brca).is_err());
    assert!(cancer_patch_origins(&GrayImage::filled(10, 10, 1), 20.0, 40.0, P).is_err());
}

fn set_of(n: usize, label: MutationStatus) -> CancerPatchSet {
    CancerPatchSet {
        slide_id: "s".into(),
        magnification: Magnification::X10,
        patch_size: P,
        label,
        subsampled: false,
        seed: None,
        patches: (0..n as u32).map(|i| (i % 100 * P, i / 100 * P)).collect(),
    }
}

#[test]
fn caps_are_honoured() {
    let caps = PatchCaps::default();
    let big = subsample(&set_of(7000, MutationStatus::Brca), &caps, 3);
    assert_eq!(big.len(), 5000);
    assert!(big.subsampled);
    assert_eq!(big.seed, Some(3));
    let small = subsample(&set_of(800, MutationStatus::NonBrca), &caps, 3);
    assert_eq!(small.patches, set_of(800, MutationStatus::NonBrca).patches);
    assert_eq!(subsample(&set_of(1500, MutationStatus::NonBrca), &caps, 3).len(), 1000);
    assert_eq!(subsample(&set_of(7000, MutationStatus::Brca), &caps, 3), big);
    assert_ne!(subsample(&set_of(7000, MutationStatus::Brca), &caps, 4).patches, big.patches);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn subsample_is_an_ordered_subset_within_cap(n in 0usize..3000, cap in 0usize..2000, seed in any::<u64>()) {
        let caps = PatchCaps { brca: cap, non_brca: cap };
        let input = set_of(n, MutationStatus::Brca);
        let out = subsample(&input, &caps, seed);
        prop_assert_eq!(out.len(), n.min(cap));
        let mut it = input.patches.iter();
        for p in &out.patches {
            prop_assert!(it.any(|q| q == p), "{:?} not found in order", p);
        }
    }

    #[test]
    fn slide_mean_is_bounded(scores in prop::collection::vec(0.0f64..=1.0, 1..200)) {
        let s = aggregate_slide("s", Magnification::X5, &scores).unwrap();
        let p = s.p_slide.unwrap();
        let lo = scores.iter().copied().fold(1.0, f64::min);
        let hi = scores.iter().copied().fold(0.0, f64::max);
        prop_assert!(lo <= p && p <= hi);
        prop_assert_eq!(s.n, scores.len());
    }
}

#[test]
fn patch_set_round_trips_as_jsonl() {
    let set = subsample(&set_of(12, MutationStatus::Brca), &PatchCaps { brca: 5, non_brca: 5 }, 9);
    let bytes = set.to_jsonl().unwrap();
    assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 6);
    assert_eq!(CancerPatchSet::from_jsonl(&bytes).unwrap(), set);
    let dir = tempfile::tempdir().unwrap();
    set.save(&dir.path().join("s.jsonl")).unwrap();
    assert_eq!(CancerPatchSet::load(&dir.path().join("s.jsonl")).unwrap(), set);
    let truncated = &bytes[..bytes.len() - 10];
    assert!(CancerPatchSet::from_jsonl(truncated).is_err());
}

#[test]
fn aggregation_examples() {
    let s = aggregate_slide("s", Magnification::X20, &[0.2, 0.4, 0.6]).unwrap();
    assert!((s.p_slide.unwrap() - 0.4).abs() < 1e-15);
    assert_eq!(s.n, 3);
    for v in [0.0, 0.1, 1.0 / 3.0, 0.7, 1.0] {
        assert_eq!(aggregate_slide("s", Magnification::X5, &[v]).unwrap().p_slide, Some(v));
    }
    let none = aggregate_slide("s", Magnification::X10, &[]).unwrap();
    assert!(!none.is_scorable());
    assert_eq!(none.n, 0);
    assert!(aggregate_slide("s", Magnification::X10, &[1.5]).is_err());
}

fn exact_mean(scores: &[f64]) -> f64 {
    let mut acc = BigRational::zero();
    for &s in scores {
        acc += BigRational::from_f64(s).unwrap();
    }
    (acc / BigRational::from_usize(scores.len()).unwrap()).to_f64().unwrap()
}

#[test]
fn mean_matches_exact_rational_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let scores: Vec<f64> = (0..1000).map(|_| rng.gen::<f64>()).collect();
        let got = aggregate_slide("s", Magnification::X5, &scores).unwrap().p_slide.unwrap();
        assert!((got - exact_mean(&scores)).abs() <= 1e-12);
    }
}

#[test]
fn class_weights_from_patch_counts() {
    let w = PatchClassWeights::from_counts([252_166, 247_059]).unwrap();
    assert!((w.w[0] - 247_059.0 / 499_225.0).abs() < 1e-15);
    assert!((w.w[0] - 0.5).abs() < 0.01 && (w.w[1] - 0.5).abs() < 0.01);
    assert!(PatchClassWeights::from_counts([10, 0]).is_err());
}

#[test]
fn selection_takes_the_best_earliest_auc() {
    assert_eq!(select_by_auc(&[Some(0.6), Some(0.8), Some(0.7)]), 1);
    assert_eq!(select_by_auc(&[Some(0.8), Some(0.8)]), 0);
    assert_eq!(select_by_auc(&[None, Some(0.5), None]), 1);
    assert_eq!(select_by_auc(&[None, None]), 1);
}

#[test]
fn magnification_parsing() {
    assert_eq!(Magnification::parse("5x").unwrap(), Magnification::X5);
    assert_eq!(Magnification::parse("20").unwrap(), Magnification::X20);
    assert!(Magnification::parse("40x").is_err());
    assert_eq!(serde_json::to_string(&Magnification::X10).unwrap(), "\"10x\"");
}

fn striped(period: u32, shift: u8) -> RgbImage {
    let mut im = RgbImage::white(P, P);
    for y in 0..P {
        for x in 0..P {
            let on = (x / period) % 2 == 0;
            let v = if on { 90 + shift } else { 230 - shift };
            im.put(x, y, [v, 120, 200]);
        }
    }
    im
}

fn patches(id: &str, label: MutationStatus, images: Vec<RgbImage>) -> SlidePatches {
    SlidePatches {
        slide_id: id.into(),
        label,
        magnification: Magnification::X5,
        subsampled: false,
        images,
    }
}

fn tiny_config(epochs: u32) -> ClfTrainConfig {
    ClfTrainConfig {
        model: ResNetConfig { width: 4 },
        epochs,
        batch_size: 2,
        lr: 1e-2,
        augment: None,
        ..ClfTrainConfig::new(Magnification::X5)
    }
}

#[test]
fn memorizes_a_brca_patch_and_predicts_deterministically() {
    let brca = striped(3, 0);
    let train = vec![
        patches("b", MutationStatus::Brca, vec![brca.clone()]),
        patches("n", MutationStatus::NonBrca, vec![striped(12, 5)]),
    ];
    // No validation slides: the final epoch is kept.
    let ck = train_classifier(&tiny_config(40), &train, &[], &mut |_| {}).unwrap();
    let model = ck.instantiate().unwrap();
    let p = predict_patch(&model, &brca, Magnification::X5).unwrap();
    assert!(p >= 0.99, "p = {p}");
    assert_eq!(p, predict_patch(&model, &brca, Magnification::X5).unwrap());
    let q = predict_patch(&model, &striped(12, 5), Magnification::X5).unwrap();
    assert!(((1.0 - q) + q - 1.0).abs() < 1e-6 && q < 0.5);
    assert!(predict_patch(&model, &brca, Magnification::X10).is_err());
    assert!(predict_patch(&model, &RgbImage::white(64, 64), Magnification::X5).is_err());
    assert_eq!(ck.meta.val_auc, None);
    assert_eq!(ck.meta.selected_epoch, 40);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m5");
    ck.save(&path).unwrap();
    assert!(matches!(ck.save(&path), Err(Error::Conflict(_))));
    let back = ClfCheckpoint::load(&path).unwrap().instantiate().unwrap();
    assert_eq!(predict_patch(&back, &brca, Magnification::X5).unwrap(), p);
}

#[test]
fn softmax_outputs_sum_to_one() {
    let ck = {
        let train = vec![
            patches("b", MutationStatus::Brca, vec![striped(3, 0)]),
            patches("n", MutationStatus::NonBrca, vec![striped(12, 5)]),
        ];
        train_classifier(&tiny_config(1), &train, &[], &mut |_| {}).unwrap()
    };
    let model = ck.instantiate().unwrap();
    for im in [striped(5, 9), striped(3, 0), RgbImage::white(P, P)] {
        let [n, b] = model.probabilities(&im).unwrap();
        assert!((n + b - 1.0).abs() < 1e-6);
        assert_eq!(b, predict_patch(&model, &im, Magnification::X5).unwrap());
    }
    assert_eq!(ck.meta.selected_epoch, 1);
    assert_eq!(ck.meta.val_auc, None);
}

#[test]
fn single_class_training_set_is_rejected() {
    let train = vec![patches("b", MutationStatus::Brca, vec![striped(3, 0)])];
    assert!(matches!(
        train_classifier(&tiny_config(1), &train, &[], &mut |_| {}),
        Err(Error::Training(_))
    ));
    let mut wrong = patches("n", MutationStatus::NonBrca, vec![striped(12, 5)]);
    wrong.magnification = Magnification::X20;
    assert!(train_classifier(&tiny_config(1), &[train[0].clone(), wrong], &[], &mut |_| {}).is_err());
}

#[test]
fn cohort_report_flags_unscorable_and_undefined() {
    let train = vec![
        patches("b", MutationStatus::Brca, vec![striped(3, 0)]),
        patches("n", MutationStatus::NonBrca, vec![striped(12, 5)]),
    ];
    let model = train_classifier(&tiny_config(20), &train, &train, &mut |_| {})
        .unwrap()
        .instantiate()
        .unwrap();
    let val = vec![
        patches("v1", MutationStatus::Brca, vec![striped(3, 1), striped(3, 2)]),
        patches("v2", MutationStatus::NonBrca, vec![striped(12, 3)]),
        patches("v3", MutationStatus::NonBrca, vec![]),
    ];
    let test = vec![
        patches("t1", MutationStatus::Brca, vec![striped(3, 4)]),
        patches("t2", MutationStatus::Brca, vec![striped(3, 6)]),
    ];
    let rows = evaluate_cohort(&model, &val, &test).unwrap();
    assert_eq!(rows[0].split, EvalSplit::Validation);
    assert_eq!(rows[0].auc, Measure::Defined(1.0));
    assert_eq!(rows[0].unscorable, vec!["v3".to_string()]);
    assert_eq!(rows[0].patches, 3);
    assert_eq!(rows[1].auc, Measure::Undefined);
    let report = CohortReport::new(rows);
    let table = report.table();
    assert!(table.contains("M_20x") && table.contains("M_10x") && table.contains("M_5x"));
    assert!(table.lines().nth(1).unwrap().starts_with("Validation AUC"));
    assert!(table.lines().nth(2).unwrap().trim_end().ends_with("n/a"));
    assert!(table.contains("unscorable slides excluded: 1"));

    let mut sub = val.clone();
    sub[0].subsampled = true;
    assert!(matches!(evaluate_cohort(&model, &sub, &test), Err(Error::Contract(_))));
}

#[test]
fn loads_patch_images_at_the_set_magnification() {
    let mut base = RgbImage::white(896, 896);
    for y in 0..896 {
        for x in 0..896 {
            if x >= 448 {
                base.put(x, y, [100, 50, 150]);
            }
        }
    }
    let slide = MemorySource::new("s", base, 20.0, 256).into_pyramid();
    let mut mask = GrayImage::filled(896, 896, 0);
    for y in 0..896 {
        for x in 448..896 {
            mask.set(x, y, 1);
        }
    }
    let set = extract_cancer_patches(&slide, &mask, Magnification::X10, MutationStatus::Brca).unwrap();
    assert_eq!(set.patches, vec![(224, 0), (224, 224)]);
    let loaded = load_slide_patches(&slide, &set).unwrap();
    assert_eq!(loaded.images.len(), 2);
    assert!(loaded.images.iter().all(|im| im.pixel(100, 100) == [100, 50, 150]));
}

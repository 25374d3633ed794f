use hccm::data::{
    downsample_negatives, gen_catalog, gen_dataset, gen_image, read_jsonl, write_jsonl, Behavior, ClickModel, Dataset,
    ImageExtents, Impression, Sample, SyntheticConfig,
};
use hccm::tensor::{sigmoid, Tensor};
use hccm::train::auc;
use hccm::Error;
use proptest::prelude::*;

fn small() -> SyntheticConfig {
    SyntheticConfig {
        users: 300,
        images_per_category: 10,
        impressions_per_user: 20,
        ..SyntheticConfig::default()
    }
}

fn labels(split: &[Sample]) -> Vec<u8> {
    split.iter().map(|s| s.label).collect()
}

#[test]
fn images_are_deterministic_and_in_range() {
    let ext = ImageExtents { height: 32, width: 32, channels: 3 };
    let a = gen_image(3, 8, 77, ext, 0.4);
    assert_eq!(a, gen_image(3, 8, 77, ext, 0.4));
    assert_ne!(a, gen_image(3, 8, 78, ext, 0.4));
    assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(a.shape(), &[32, 32, 3]);
}

/// Directional gradient energies: stripe orientation shows up as which
/// axis carries the pixel variation.
fn gradient_energy(img: &Tensor) -> [f64; 2] {
    let &[h, w, c] = img.shape() else { unreachable!() };
    let px = |y: usize, x: usize, ch: usize| img.data()[(y * w + x) * c + ch];
    let (mut gx, mut gy) = (0.0, 0.0);
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            for ch in 0..c {
                gx += (px(y, x + 1, ch) - px(y, x, ch)).powi(2);
                gy += (px(y + 1, x, ch) - px(y, x, ch)).powi(2);
            }
        }
    }
    let n = ((h - 1) * (w - 1) * c) as f64;
    [gx / n, gy / n]
}

#[test]
fn noiseless_categories_are_linearly_separable() {
    let ext = ImageExtents { height: 32, width: 32, channels: 3 };
    let examples: Vec<([f64; 2], f64)> = (0..80u64)
        .map(|i| {
            let cat = (i % 2) as usize;
            let e = gradient_energy(&gen_image(cat, 2, 1000 + i, ext, 0.0));
            (e, if cat == 0 { 1.0 } else { -1.0 })
        })
        .collect();
    // Perceptron oracle on [gx, gy, 1].
    let mut w = [0.0f64; 3];
    for _ in 0..1000 {
        let mut mistakes = 0;
        for (x, y) in &examples {
            let score = w[0] * x[0] + w[1] * x[1] + w[2];
            if score * y <= 0.0 {
                mistakes += 1;
                w[0] += y * x[0];
                w[1] += y * x[1];
                w[2] += y;
            }
        }
        if mistakes == 0 {
            break;
        }
    }
    let correct = examples
        .iter()
        .filter(|(x, y)| (w[0] * x[0] + w[1] * x[1] + w[2]) * y > 0.0)
        .count();
    assert_eq!(correct, examples.len());
}

#[test]
fn no_signal_ctr_matches_bias() {
    let cfg = SyntheticConfig {
        alpha: 0.0,
        beta: 0.0,
        bias: -1.0,
        ..small()
    };
    let ds = gen_dataset(&cfg).unwrap();
    let all: Vec<&Sample> = ds.train.iter().chain(&ds.test).collect();
    let n = all.len() as f64;
    let ctr = all.iter().filter(|s| s.label == 1).count() as f64 / n;
    let p = sigmoid(-1.0);
    let se = (p * (1.0 - p) / n).sqrt();
    assert!((ctr - p).abs() <= 3.0 * se, "ctr {ctr} vs {p} (se {se})");
}

#[test]
fn strong_category_signal_is_recoverable_by_share_oracle() {
    let cfg = SyntheticConfig {
        alpha: 0.0,
        beta: 12.0,
        bias: -6.0,
        ..small()
    };
    let ds = gen_dataset(&cfg).unwrap();
    let scores: Vec<f64> = ds.test.iter().map(|s| ClickModel::category_share(&s.impression)).collect();
    let a = auc(&scores, &labels(&ds.test)).unwrap();
    assert!(a > 0.9, "share oracle AUC {a}");
}

#[test]
fn visual_oracle_auc_increases_with_alpha() {
    let aucs: Vec<f64> = [0.5, 3.0, 8.0]
        .iter()
        .map(|&alpha| {
            let cfg = SyntheticConfig {
                alpha,
                beta: 0.0,
                ..small()
            };
            let ds = gen_dataset(&cfg).unwrap();
            let model = ClickModel::new(&ds.catalog, &cfg);
            let scores: Vec<f64> = ds.test.iter().map(|s| model.visual_similarity(&s.impression)).collect();
            auc(&scores, &labels(&ds.test)).unwrap()
        })
        .collect();
    assert!(aucs[0] < aucs[1] && aucs[1] < aucs[2], "{aucs:?}");
}

#[test]
fn dataset_files_are_byte_identical_across_runs() {
    let cfg = SyntheticConfig { users: 40, ..small() };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        gen_dataset(&cfg).unwrap().save(d.path()).unwrap();
    }
    for file in [Dataset::TRAIN_FILE, Dataset::TEST_FILE, Dataset::CATALOG_FILE] {
        let a = std::fs::read(dirs[0].path().join(file)).unwrap();
        let b = std::fs::read(dirs[1].path().join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let loaded = Dataset::load(dirs[0].path()).unwrap();
    assert_eq!(loaded, gen_dataset(&cfg).unwrap());
}

#[test]
fn splits_reference_only_catalog_images_within_bounds() {
    let cfg = small();
    let ds = gen_dataset(&cfg).unwrap();
    assert_eq!(ds.catalog.len(), cfg.num_images());
    for (i, e) in ds.catalog.entries().iter().enumerate() {
        assert_eq!(e.pic_id, i as u64);
    }
    for s in ds.train.iter().chain(&ds.test) {
        let imp = &s.impression;
        assert!(imp.behaviors.len() >= cfg.min_behaviors && imp.behaviors.len() <= cfg.max_behaviors);
        let entry = ds.catalog.get(imp.pic_id).unwrap();
        assert_eq!(entry.category, imp.category);
        for b in &imp.behaviors {
            assert_eq!(ds.catalog.get(b.pic_id).unwrap().category, b.category);
        }
    }
    let train_users: std::collections::BTreeSet<u64> = ds.train.iter().map(|s| s.impression.user_id).collect();
    assert!(ds.test.iter().all(|s| !train_users.contains(&s.impression.user_id)));
}

#[test]
fn catalog_is_stable_under_seed() {
    let cfg = small();
    assert_eq!(gen_catalog(&cfg).unwrap(), gen_catalog(&cfg).unwrap());
    let other = SyntheticConfig { seed: 8, ..small() };
    assert_ne!(gen_catalog(&cfg).unwrap(), gen_catalog(&other).unwrap());
}

#[test]
fn jsonl_round_trip_and_label_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    let sample = Sample {
        impression: Impression {
            user_id: 1,
            context_ids: vec![3, 4],
            item_id: 5,
            pic_id: 5,
            category: 2,
            behaviors: vec![Behavior { pic_id: 9, category: 1 }],
        },
        label: 1,
    };
    write_jsonl(&path, std::slice::from_ref(&sample)).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), vec![sample]);
    std::fs::write(&path, "{\"user_id\":1,\"context_ids\":[],\"item_id\":1,\"pic_id\":1,\"category\":0,\"behaviors\":[],\"label\":3}\n").unwrap();
    assert!(read_jsonl(&path).is_err());
}

fn negatives(n: usize) -> Vec<Sample> {
    (0..n as u64)
        .map(|i| Sample {
            impression: Impression {
                user_id: i,
                context_ids: vec![],
                item_id: i,
                pic_id: 0,
                category: 0,
                behaviors: vec![],
            },
            label: 0,
        })
        .collect()
}

#[test]
fn downsampling_reference_cases() {
    let split = negatives(10_000);
    assert_eq!(downsample_negatives(&split, 1.0, 3).unwrap(), split);
    let kept = downsample_negatives(&split, 0.2, 3).unwrap().len();
    assert!((1800..=2200).contains(&kept), "{kept}");
    for rate in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(matches!(downsample_negatives(&split, rate, 3), Err(Error::Config(_))));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn downsampling_keeps_positives_in_order(
        labels in prop::collection::vec(0u8..2, 0..300),
        rate in 0.01f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut split = negatives(labels.len());
        for (s, &l) in split.iter_mut().zip(&labels) {
            s.label = l;
        }
        let kept = downsample_negatives(&split, rate, seed).unwrap();
        let positives = labels.iter().filter(|&&l| l == 1).count();
        prop_assert_eq!(kept.iter().filter(|s| s.label == 1).count(), positives);
        let ids: Vec<u64> = kept.iter().map(|s| s.impression.user_id).collect();
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
    }
}

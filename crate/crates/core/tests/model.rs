use std::borrow::Cow;

use hccm::cache::FeatureMapCache;
use hccm::data::{Behavior, CatalogEntry, ImageCatalog, ImageExtents, Impression};
use hccm::model::{FeatureSource, HccmModel, ModelConfig, OnTheFly, Variant, VisualInput};
use hccm::tensor::{param_grad_check, sigmoid, Graph, Tensor};
use hccm::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_catalog(cfg: &ModelConfig, n: usize, seed: u64) -> ImageCatalog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extents = cfg.image_extents();
    let entries = (0..n as u64)
        .map(|pic| CatalogEntry {
            pic_id: pic,
            category: (pic % cfg.num_categories as u64) as u32,
            image: Tensor::new(
                &extents.shape(),
                (0..extents.len()).map(|_| rng.random_range(0.0..1.0f32) as f64).collect(),
            )
            .unwrap(),
        })
        .collect();
    ImageCatalog::new(extents, entries).unwrap()
}

fn impression(cfg: &ModelConfig, pic: u64, behaviors: &[u64]) -> Impression {
    let cat = |p: u64| (p % cfg.num_categories as u64) as u32;
    Impression {
        user_id: 42,
        context_ids: (0..cfg.context_fields as u64).collect(),
        item_id: pic,
        pic_id: pic,
        category: cat(pic),
        behaviors: behaviors
            .iter()
            .map(|&p| Behavior {
                pic_id: p,
                category: cat(p),
            })
            .collect(),
    }
}

/// Moves every parameter away from its initialization so no gradient is
/// trivially zero (the prior starts at zero, biases too).
fn perturb(model: &mut HccmModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params().trainable().collect();
    for id in ids {
        for v in model.params_mut().value_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

#[test]
fn default_fixed_stack_yields_4x4x16_maps() {
    let cfg = ModelConfig::default();
    let model = HccmModel::new(cfg.clone(), Variant::Hccm, 1).unwrap();
    let catalog = toy_catalog(&cfg, 1, 1);
    let img = &catalog.entries()[0].image;
    let a = model.fixed_cnn_forward(img).unwrap();
    let b = model.fixed_cnn_forward(img).unwrap();
    assert_eq!(a.shape(), &[4, 4, 16]);
    assert_eq!(a, b);
    let wrong = Tensor::zeros(&[16, 16, 3]);
    assert!(matches!(model.fixed_cnn_forward(&wrong), Err(Error::Shape(_))));
}

#[test]
fn frozen_weights_get_no_gradient_in_any_variant() {
    let cfg = ModelConfig::toy();
    let catalog = toy_catalog(&cfg, 6, 2);
    for variant in Variant::ALL {
        let model = HccmModel::new(cfg.clone(), variant, 3).unwrap();
        let src = OnTheFly { model: &model, catalog: &catalog };
        let imp = impression(&cfg, 1, &[2, 3, 4]);
        let mut g = Graph::with_params(model.params());
        let loss = model.loss(&mut g, &[&imp], &[1.0], Some(VisualInput::Maps(&src))).unwrap();
        let grads = g.backward(loss).unwrap();
        for layer in model.fixed_convs() {
            assert!(grads.param(layer.kernel).is_none() && grads.param(layer.bias).is_none());
        }
        assert!(grads.params().count() > 0);
    }
}

#[test]
fn channel_attention_reference_cases() {
    let cfg = ModelConfig::default();
    let model = HccmModel::new(cfg.clone(), Variant::Hccm, 4).unwrap();
    let mut g = Graph::with_params(model.params());
    let f = g.constant(Tensor::full(&[1, 4, 4, 16], 0.3)).unwrap();
    let v = g.constant(Tensor::full(&[1, 16], 0.1)).unwrap();
    let m = model.channel_attention(&mut g, f, Some(v)).unwrap();
    assert_eq!(g.shape(m), &[1, 16]);

    let mut zeroed = model.clone();
    let mlp = zeroed.channel_attention_mlp().unwrap().clone();
    for layer in mlp.layers() {
        for id in [layer.weight, layer.bias] {
            zeroed.params_mut().value_mut(id).data_mut().fill(0.0);
        }
    }
    let mut g = Graph::with_params(zeroed.params());
    let f = g.constant(Tensor::full(&[1, 4, 4, 16], 0.3)).unwrap();
    let v = g.constant(Tensor::full(&[1, 16], 0.1)).unwrap();
    let m = zeroed.channel_attention(&mut g, f, Some(v)).unwrap();
    assert!(g.value(m).data().iter().all(|&x| x == 0.5));
    let short = g.constant(Tensor::full(&[1, 15], 0.1)).unwrap();
    assert!(matches!(zeroed.channel_attention(&mut g, f, Some(short)), Err(Error::Shape(_))));
}

#[test]
fn constant_maps_give_doubled_branch_by_hand() {
    let cfg = ModelConfig {
        fixed_channels: vec![2],
        ..ModelConfig::toy()
    };
    let mut model = HccmModel::new(cfg.clone(), Variant::Hccm, 5).unwrap();
    perturb(&mut model, 6);
    let ext = model.feature_extents();
    assert_eq!((ext.height, ext.width, ext.channels), (4, 4, 2));
    let z = [0.7, -0.2];
    let v: Vec<f64> = (0..ext.area()).map(|i| i as f64 * 0.05 - 0.3).collect();
    let mut map = Vec::new();
    for _ in 0..ext.area() {
        map.extend_from_slice(&z);
    }

    // Hand evaluation of the shared MLP on [z, v].
    let mlp = model.channel_attention_mlp().unwrap();
    let mut x: Vec<f64> = z.iter().chain(&v).copied().collect();
    for (i, layer) in mlp.layers().iter().enumerate() {
        let w = model.params().value(layer.weight).data();
        let b = model.params().value(layer.bias).data();
        let mut y = b.to_vec();
        for (o, yo) in y.iter_mut().enumerate() {
            for (j, xj) in x.iter().enumerate() {
                *yo += xj * w[j * layer.output + o];
            }
        }
        if i + 1 < mlp.layers().len() {
            y.iter_mut().for_each(|t| *t = t.max(0.0));
        }
        x = y;
    }
    let expected: Vec<f64> = x.iter().map(|&t| sigmoid(2.0 * t)).collect();

    let mut g = Graph::with_params(model.params());
    let f = g.constant(Tensor::new(&[1, 4, 4, 2], map).unwrap()).unwrap();
    let pv = g.constant(Tensor::new(&[1, 16], v).unwrap()).unwrap();
    let m = model.channel_attention(&mut g, f, Some(pv)).unwrap();
    for (a, b) in g.value(m).data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }
}

#[test]
fn fuse_prior_reference_cases() {
    let model = HccmModel::new(ModelConfig::default(), Variant::Hccm, 7).unwrap();
    let mut g = Graph::with_params(model.params());
    let v: Vec<f64> = (0..16).map(|i| i as f64).collect();
    let zeros = g.constant(Tensor::zeros(&[1, 4, 4, 16])).unwrap();
    let gate = g.constant(Tensor::full(&[1, 16], 0.8)).unwrap();
    let pv = g.constant(Tensor::new(&[1, 16], v.clone()).unwrap()).unwrap();
    let fused = model.fuse_prior(&mut g, zeros, gate, Some(pv)).unwrap();
    assert_eq!(g.shape(fused), &[1, 4, 4, 17]);
    for (p, px) in g.value(fused).data().chunks(17).enumerate() {
        assert!(px[..16].iter().all(|&x| x == 0.0));
        assert_eq!(px[16], v[p]);
    }

    let f = Tensor::new(&[1, 4, 4, 16], (0..256).map(|i| (i as f64).sin()).collect()).unwrap();
    let fv = g.constant(f.clone()).unwrap();
    let ones = g.constant(Tensor::full(&[1, 16], 1.0)).unwrap();
    let zero_prior = g.constant(Tensor::zeros(&[1, 16])).unwrap();
    let fused = model.fuse_prior(&mut g, fv, ones, Some(zero_prior)).unwrap();
    for (out, inp) in g.value(fused).data().chunks(17).zip(f.data().chunks(16)) {
        assert_eq!(&out[..16], inp);
        assert_eq!(out[16], 0.0);
    }
    let bad = g.constant(Tensor::zeros(&[1, 9])).unwrap();
    assert!(matches!(model.fuse_prior(&mut g, fv, ones, Some(bad)), Err(Error::Shape(_))));
}

#[test]
fn trainable_cnn_contracts_and_gradients() {
    let model = HccmModel::new(ModelConfig::default(), Variant::Hccm, 8).unwrap();
    {
        let mut g = Graph::with_params(model.params());
        let x = g.constant(Tensor::zeros(&[1, 4, 4, 17])).unwrap();
        let out = model.trainable_cnn_forward(&mut g, x).unwrap();
        assert_eq!(g.shape(out), &[1, 32]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
        let wrong = g.constant(Tensor::zeros(&[1, 4, 4, 16])).unwrap();
        assert!(matches!(model.trainable_cnn_forward(&mut g, wrong), Err(Error::Shape(_))));
    }

}

#[test]
fn trainable_cnn_gradients_match_finite_differences() {
    let mut model = HccmModel::new(ModelConfig::toy(), Variant::Hccm, 11).unwrap();
    perturb(&mut model, 12);
    let input = Tensor::new(&[2, 2, 2, 9], (0..72).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
    let frozen_model = model.clone();
    let report = param_grad_check(model.params_mut(), 1e-5, |g| {
        let x = g.constant(input.clone())?;
        let out = frozen_model.trainable_cnn_forward(g, x)?;
        g.sum(out)
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
}

#[test]
fn behavior_aggregation_reference_cases() {
    let model = HccmModel::new(ModelConfig::toy(), Variant::Hccm, 13).unwrap();
    let mut g = Graph::with_params(model.params());
    let item = g.constant(Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
    let one = g.constant(Tensor::new(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
    let x = model.aggregate_behaviors(&mut g, Some(one), item, &[true]).unwrap();
    assert_eq!(g.value(x).data(), &[0.1, 0.2, 0.3]);
    let x = model.aggregate_behaviors(&mut g, None, item, &[]).unwrap();
    assert_eq!(g.value(x).data(), &[0.0; 3]);
    let keys = g.constant(Tensor::new(&[2, 3], vec![1.0; 6]).unwrap()).unwrap();
    let x = model.aggregate_behaviors(&mut g, Some(keys), item, &[false, false]).unwrap();
    assert_eq!(g.value(x).data(), &[0.0; 3]);
}

#[test]
fn zero_head_predicts_one_half_for_every_variant() {
    let cfg = ModelConfig::toy();
    let catalog = toy_catalog(&cfg, 6, 14);
    for variant in Variant::ALL {
        let mut model = HccmModel::new(cfg.clone(), variant, 15).unwrap();
        let head = model.head().clone();
        for layer in head.layers() {
            model.params_mut().value_mut(layer.weight).data_mut().fill(0.0);
            model.params_mut().value_mut(layer.bias).data_mut().fill(0.0);
        }
        let src = OnTheFly { model: &model, catalog: &catalog };
        for beh in [&[][..], &[1, 2][..], &[3, 4, 5, 0, 1, 2][..]] {
            let p = model.predict(&impression(&cfg, 0, beh), Some(VisualInput::Maps(&src))).unwrap();
            assert_eq!(p, 0.5);
        }
    }
}

#[test]
fn cache_and_recompute_paths_agree() {
    let cfg = ModelConfig::toy();
    let catalog = toy_catalog(&cfg, 6, 16);
    let mut model = HccmModel::new(cfg.clone(), Variant::Hccm, 17).unwrap();
    perturb(&mut model, 18);
    let cache = FeatureMapCache::precompute(&model, &catalog).unwrap();
    let src = OnTheFly { model: &model, catalog: &catalog };
    let imp = impression(&cfg, 2, &[0, 1, 5]);
    let a = model.predict(&imp, Some(VisualInput::Maps(&cache))).unwrap();
    let b = model.predict(&imp, Some(VisualInput::Maps(&src))).unwrap();
    assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    assert_eq!(a.to_bits(), b.to_bits());

    let missing = impression(&cfg, 2, &[0, 99]);
    assert!(matches!(
        model.predict(&missing, Some(VisualInput::Maps(&cache))),
        Err(Error::CacheMiss(99))
    ));
}

#[test]
fn malformed_samples_are_rejected() {
    let cfg = ModelConfig::toy();
    let catalog = toy_catalog(&cfg, 6, 19);
    let model = HccmModel::new(cfg.clone(), Variant::Hccm, 20).unwrap();
    let src = OnTheFly { model: &model, catalog: &catalog };
    let vis = Some(VisualInput::Maps(&src));
    let mut bad_ctx = impression(&cfg, 1, &[2]);
    bad_ctx.context_ids.push(9);
    assert!(matches!(model.predict(&bad_ctx, vis), Err(Error::Validation(_))));
    let mut bad_cat = impression(&cfg, 1, &[2]);
    bad_cat.behaviors[0].category = 77;
    assert!(matches!(model.predict(&bad_cat, vis), Err(Error::Validation(_))));
    assert!(matches!(model.predict(&impression(&cfg, 1, &[2]), None), Err(Error::Contract(_))));
}

#[test]
fn hcm_equals_hccm_with_silenced_prior() {
    let cfg = ModelConfig::toy();
    let catalog = toy_catalog(&cfg, 6, 21);
    let mut hcm = HccmModel::new(cfg.clone(), Variant::Hcm, 22).unwrap();
    perturb(&mut hcm, 23);
    let mut hccm = HccmModel::new(cfg.clone(), Variant::Hccm, 24).unwrap();
    perturb(&mut hccm, 25);

    let c = hcm.feature_extents().channels;
    let area = hcm.feature_extents().area();
    // Copy every shared parameter by name; the attention MLP's first layer
    // and the first trainable kernel have extra input rows in HCCM.
    let names: Vec<(String, Vec<f64>)> = hcm
        .params()
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.data().to_vec()))
        .collect();
    let ids: Vec<_> = hccm.params().ids().collect();
    for id in ids {
        let name = hccm.params().get(id).name.clone();
        let dst = hccm.params_mut().value_mut(id);
        if name == "category_prior" {
            dst.data_mut().fill(0.0);
            continue;
        }
        let src = &names.iter().find(|(n, _)| *n == name).unwrap().1;
        if name == "channel_attn.0.weight" {
            let hidden = src.len() / c;
            let d = dst.data_mut();
            d[..c * hidden].copy_from_slice(src);
            assert_eq!(d.len(), (c + area) * hidden);
        } else if name == "trainable.0.kernel" {
            let cout = cfg.trainable_hidden;
            let d = dst.data_mut();
            for (tap, chunk) in d.chunks_mut((c + 1) * cout).enumerate() {
                chunk[..c * cout].copy_from_slice(&src[tap * c * cout..(tap + 1) * c * cout]);
                chunk[c * cout..].fill(0.0);
            }
        } else {
            dst.data_mut().copy_from_slice(src);
        }
    }
    let imp = impression(&cfg, 3, &[0, 1, 4, 5]);
    let a = hcm
        .predict(&imp, Some(VisualInput::Maps(&OnTheFly { model: &hcm, catalog: &catalog })))
        .unwrap();
    let b = hccm
        .predict(&imp, Some(VisualInput::Maps(&OnTheFly { model: &hccm, catalog: &catalog })))
        .unwrap();
    assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
}

#[test]
fn full_model_gradient_check_on_toy_config() {
    let cfg = ModelConfig::toy();
    let catalog = toy_catalog(&cfg, 6, 26);
    let mut model = HccmModel::new(cfg.clone(), Variant::Hccm, 27).unwrap();
    perturb(&mut model, 28);
    let maps = FeatureMapCache::precompute(&model, &catalog).unwrap();
    let imp = impression(&cfg, 2, &[0, 1, 4]);
    let frozen = model.clone();
    let report = param_grad_check(model.params_mut(), 1e-5, |g| {
        frozen.loss(g, &[&imp], &[1.0], Some(VisualInput::Maps(&maps)))
    })
    .unwrap();
    assert!(report.max_rel_err <= 1e-4, "{report:?}");
    assert!(report.frozen_untouched);
}

#[test]
fn checkpoint_round_trip_preserves_predictions_at_f32() {
    let cfg = ModelConfig::toy();
    let mut model = HccmModel::new(cfg, Variant::Hccm, 30).unwrap();
    perturb(&mut model, 31);
    let bytes = model.to_checkpoint_bytes();
    let loaded = HccmModel::from_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(loaded.variant(), Variant::Hccm);
    assert_eq!(loaded.config(), model.config());
    assert_eq!(loaded.to_checkpoint_bytes(), bytes);
    for ((_, a), (_, b)) in loaded.params().iter().zip(model.params().iter()) {
        for (x, y) in a.value.data().iter().zip(b.value.data()) {
            assert_eq!(*x, *y as f32 as f64);
        }
    }
    assert!(HccmModel::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(HccmModel::from_checkpoint_bytes(b"nope").is_err());
}

struct Shuffled<'a> {
    inner: &'a dyn FeatureSource,
}

impl FeatureSource for Shuffled<'_> {
    fn feature_map(&self, pic_id: u64) -> hccm::Result<Cow<'_, Tensor>> {
        self.inner.feature_map(pic_id)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn predictions_are_probabilities_and_order_free(
        behaviors in prop::collection::vec(0u64..6, 0..7),
        pic in 0u64..6,
        seed in 0u64..1000,
        variant_idx in 0usize..4,
    ) {
        let cfg = ModelConfig::toy();
        let catalog = toy_catalog(&cfg, 6, 32);
        let variant = Variant::ALL[variant_idx];
        let mut model = HccmModel::new(cfg.clone(), variant, seed).unwrap();
        perturb(&mut model, seed + 1);
        let src = OnTheFly { model: &model, catalog: &catalog };
        let wrapped = Shuffled { inner: &src };
        let vis = Some(VisualInput::Maps(&wrapped));
        // Behavior order is irrelevant only within the truncation window.
        let window: Vec<u64> = behaviors.iter().rev().take(cfg.max_behaviors).rev().copied().collect();
        let p = model.predict(&impression(&cfg, pic, &window), vis).unwrap();
        prop_assert!(p > 0.0 && p < 1.0);
        let mut reversed = window.clone();
        reversed.reverse();
        let q = model.predict(&impression(&cfg, pic, &reversed), vis).unwrap();
        prop_assert!((p - q).abs() <= 1e-12, "{} vs {}", p, q);
    }

    #[test]
    fn channel_gate_is_strictly_inside_unit_interval(scale in 0.1f64..4.0, seed in 0u64..1000) {
        let cfg = ModelConfig::toy();
        let mut model = HccmModel::new(cfg, Variant::Hccm, seed).unwrap();
        perturb(&mut model, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let maps: Vec<f64> = (0..2 * 2 * 2 * 8).map(|_| rng.random_range(0.0..scale)).collect();
        let mut g = Graph::with_params(model.params());
        let f = g.constant(Tensor::new(&[2, 2, 2, 8], maps).unwrap()).unwrap();
        let v = model.prior_vectors(&mut g, &[0, 2]).unwrap();
        let m = model.channel_attention(&mut g, f, v).unwrap();
        prop_assert!(g.value(m).data().iter().all(|&x| x > 0.0 && x < 1.0));
    }
}

#[test]
fn extents_helper_matches_catalog() {
    let cfg = ModelConfig::toy();
    assert_eq!(cfg.image_extents(), ImageExtents { height: 8, width: 8, channels: 3 });
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cache::FeatureMapCache;
use crate::data::{Behavior, CatalogEntry, ImageCatalog, Impression};
use crate::error::Result;
use crate::hash::derive_seed;
use crate::tensor::{param_grad_check, ParamCheckReport, Tensor};

use super::{HccmModel, ModelConfig, Variant, VisualInput};

/// Central-difference step used by [`toy_gradcheck`].
pub const GRADCHECK_EPS: f64 = 1e-5;

/// Checks every trainable gradient of `variant` on [`ModelConfig::toy`]:
/// random images, one impression with three behaviors, parameters moved off
/// their initialization so no gradient is trivially zero.
pub fn toy_gradcheck(variant: Variant, seed: u64) -> Result<ParamCheckReport> {
    let cfg = ModelConfig::toy();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6c));
    let extents = cfg.image_extents();
    let cat = |p: u64| (p % cfg.num_categories as u64) as u32;
    let entries = (0..6u64)
        .map(|pic| {
            let data = (0..extents.len()).map(|_| rng.random_range(0.0..1.0f32) as f64).collect();
            Ok(CatalogEntry {
                pic_id: pic,
                category: cat(pic),
                image: Tensor::new(&extents.shape(), data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let catalog = ImageCatalog::new(extents, entries)?;

    let mut model = HccmModel::new(cfg.clone(), variant, seed)?;
    let ids: Vec<_> = model.params().trainable().collect();
    for id in ids {
        for v in model.params_mut().value_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let maps = variant
        .has_visual()
        .then(|| FeatureMapCache::precompute(&model, &catalog))
        .transpose()?;
    let imp = Impression {
        user_id: 42,
        context_ids: (0..cfg.context_fields as u64).collect(),
        item_id: 2,
        pic_id: 2,
        category: cat(2),
        behaviors: [0u64, 1, 4]
            .iter()
            .map(|&p| Behavior { pic_id: p, category: cat(p) })
            .collect(),
    };
    let frozen = model.clone();
    let visual = maps.as_ref().map(|m| VisualInput::Maps(m));
    param_grad_check(model.params_mut(), GRADCHECK_EPS, |g| {
        frozen.loss(g, &[&imp], &[1.0], visual)
    })
}

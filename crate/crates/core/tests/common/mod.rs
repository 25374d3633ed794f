#![allow(dead_code)]

use hccm::data::{gen_dataset, Dataset, SyntheticConfig};
use hccm::model::ModelConfig;

/// A few hundred samples over 16x16 images; fast enough for full training runs.
pub fn small_data() -> SyntheticConfig {
    SyntheticConfig {
        users: 60,
        num_categories: 4,
        images_per_category: 6,
        image_height: 16,
        image_width: 16,
        impressions_per_user: 8,
        max_behaviors: 6,
        context_fields: 1,
        ..SyntheticConfig::default()
    }
}

pub fn small_model(data: &SyntheticConfig) -> ModelConfig {
    ModelConfig {
        fixed_channels: vec![4, 8],
        trainable_hidden: 6,
        repr_dim: 8,
        embed_dim: 4,
        table_bits: 6,
        hidden: vec![16, 8],
        ..ModelConfig::matching(data)
    }
}

pub fn small_dataset() -> (Dataset, ModelConfig) {
    let data = small_data();
    let ds = gen_dataset(&data).unwrap();
    (ds, small_model(&data))
}

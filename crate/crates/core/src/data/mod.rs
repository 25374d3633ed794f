//! Impression samples, image catalogs and the synthetic log generator.

mod image;
mod sample;
mod synth;

pub use image::{gen_image, CatalogEntry, ImageCatalog, ImageExtents, Style};
pub use sample::{read_jsonl, write_jsonl, Behavior, Impression, Sample};
pub use synth::{
    cosine, downsample_negatives, gen_catalog, gen_category_image, gen_dataset, visual_grid, ClickModel, Dataset,
    SyntheticConfig,
};

pub(crate) use image::{read_u32, read_u64};

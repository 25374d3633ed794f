//! Synthetic impression log with a planted visual-preference signal.
//!
//! Each user has a preferred-category mixture and a color taste. Clicked
//! (behavior) images are drawn from the preferred categories, favoring images
//! whose base color is close to the taste. A candidate is clicked with
//! probability `sigmoid(bias + alpha * sim + beta * share)` where `sim` is the
//! cosine similarity between the candidate's down-sampled pixel grid and the
//! mean grid of the user's behavior images, and `share` is the fraction of
//! behaviors in the candidate's category.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{gen_image, CatalogEntry, ImageCatalog, ImageExtents, Style};
use super::sample::{read_jsonl, write_jsonl, Behavior, Impression, Sample};
use crate::error::{Error, Result};
use crate::hash::derive_seed;
use crate::tensor::{sigmoid, Tensor};

const STREAM_IMAGE: u64 = 1 << 40;
const STREAM_USER: u64 = 2 << 40;
const STREAM_DOWNSAMPLE: u64 = 3 << 40;
/// Side of the square pixel block averaged into one grid cell.
const GRID_BLOCK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub users: usize,
    pub num_categories: usize,
    pub images_per_category: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub min_behaviors: usize,
    pub max_behaviors: usize,
    pub impressions_per_user: usize,
    /// Fraction of users (taken from the end of the id range) held out for test.
    pub test_user_fraction: f64,
    /// Pixel noise level in [0,1].
    pub style_noise: f64,
    /// Weight of visual similarity in the click logit.
    pub alpha: f64,
    /// Weight of the category-match share in the click logit.
    pub beta: f64,
    pub bias: f64,
    /// Probability that a candidate is drawn from the user's own categories.
    pub in_mixture_rate: f64,
    /// Width of the color-taste kernel used when sampling behavior images.
    pub taste_width: f64,
    pub context_fields: usize,
    pub context_cardinality: u64,
    /// Negative keep-rate applied to the train split (1.0 keeps everything).
    pub train_negative_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            users: 2000,
            num_categories: 8,
            images_per_category: 40,
            image_height: 32,
            image_width: 32,
            image_channels: 3,
            min_behaviors: 3,
            max_behaviors: 10,
            impressions_per_user: 30,
            test_user_fraction: 1.0 / 6.0,
            style_noise: 0.1,
            alpha: 3.0,
            beta: 1.5,
            bias: -1.5,
            in_mixture_rate: 0.5,
            taste_width: 0.15,
            context_fields: 2,
            context_cardinality: 16,
            train_negative_rate: 1.0,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn extents(&self) -> ImageExtents {
        ImageExtents {
            height: self.image_height,
            width: self.image_width,
            channels: self.image_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_categories < 2 {
            return fail("num_categories must be at least 2");
        }
        if self.num_categories > u16::MAX as usize {
            return fail("num_categories must fit in 16 bits");
        }
        if self.users == 0 || self.images_per_category == 0 || self.impressions_per_user == 0 {
            return fail("users, images_per_category and impressions_per_user must be positive");
        }
        if self.image_height == 0 || self.image_width == 0 || self.image_channels == 0 {
            return fail("image extents must be positive");
        }
        if self.min_behaviors > self.max_behaviors {
            return fail("min_behaviors exceeds max_behaviors");
        }
        if !(0.0..1.0).contains(&self.test_user_fraction) {
            return fail("test_user_fraction must be in [0,1)");
        }
        if !(0.0..=1.0).contains(&self.style_noise) {
            return fail("style_noise must be in [0,1]");
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return fail("alpha and beta must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.in_mixture_rate) || self.taste_width <= 0.0 {
            return fail("in_mixture_rate must be in [0,1] and taste_width positive");
        }
        if self.context_cardinality == 0 {
            return fail("context_cardinality must be positive");
        }
        if !(self.train_negative_rate > 0.0 && self.train_negative_rate <= 1.0) {
            return fail("train_negative_rate must be in (0,1]");
        }
        Ok(())
    }

    pub fn num_images(&self) -> usize {
        self.num_categories * self.images_per_category
    }

    fn style_seed(&self, pic: u64) -> u64 {
        derive_seed(self.seed, STREAM_IMAGE + pic)
    }
}

/// Generates the image for a category under a config.
pub fn gen_category_image(category: usize, style_seed: u64, cfg: &SyntheticConfig) -> Tensor {
    gen_image(category, cfg.num_categories, style_seed, cfg.extents(), cfg.style_noise)
}

pub fn gen_catalog(cfg: &SyntheticConfig) -> Result<ImageCatalog> {
    cfg.validate()?;
    let entries = (0..cfg.num_images() as u64)
        .map(|pic| {
            let category = pic as usize / cfg.images_per_category;
            CatalogEntry {
                pic_id: pic,
                category: category as u32,
                image: gen_category_image(category, cfg.style_seed(pic), cfg),
            }
        })
        .collect();
    ImageCatalog::new(cfg.extents(), entries)
}

/// Block-averaged, 0.5-centered pixel grid used by the click model.
pub fn visual_grid(image: &Tensor) -> Vec<f64> {
    let &[h, w, c] = image.shape() else {
        panic!("visual_grid expects an HxWxC image");
    };
    let (gh, gw) = (h.div_ceil(GRID_BLOCK), w.div_ceil(GRID_BLOCK));
    let mut grid = vec![0.0; gh * gw * c];
    let mut counts = vec![0usize; gh * gw];
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            let cell = (y / GRID_BLOCK) * gw + x / GRID_BLOCK;
            counts[cell] += 1;
            for ch in 0..c {
                grid[cell * c + ch] += d[(y * w + x) * c + ch];
            }
        }
    }
    for (cell, &n) in counts.iter().enumerate() {
        for ch in 0..c {
            grid[cell * c + ch] = grid[cell * c + ch] / n as f64 - 0.5;
        }
    }
    grid
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Ground-truth signals of the click model, computed from images directly.
pub struct ClickModel<'a> {
    grids: Vec<Vec<f64>>,
    cfg: &'a SyntheticConfig,
}

impl<'a> ClickModel<'a> {
    pub fn new(catalog: &ImageCatalog, cfg: &'a SyntheticConfig) -> Self {
        ClickModel {
            grids: catalog.entries().iter().map(|e| visual_grid(&e.image)).collect(),
            cfg,
        }
    }

    /// Cosine similarity of the candidate grid and the mean behavior grid.
    pub fn visual_similarity(&self, imp: &Impression) -> f64 {
        if imp.behaviors.is_empty() {
            return 0.0;
        }
        let cand = &self.grids[imp.pic_id as usize];
        let mut mean = vec![0.0; cand.len()];
        for b in &imp.behaviors {
            for (m, v) in mean.iter_mut().zip(&self.grids[b.pic_id as usize]) {
                *m += v;
            }
        }
        cosine(cand, &mean)
    }

    pub fn category_share(imp: &Impression) -> f64 {
        if imp.behaviors.is_empty() {
            return 0.0;
        }
        let hits = imp.behaviors.iter().filter(|b| b.category == imp.category).count();
        hits as f64 / imp.behaviors.len() as f64
    }

    pub fn click_probability(&self, imp: &Impression) -> f64 {
        sigmoid(self.cfg.bias + self.cfg.alpha * self.visual_similarity(imp) + self.cfg.beta * Self::category_share(imp))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub catalog: ImageCatalog,
}

impl Dataset {
    pub const TRAIN_FILE: &'static str = "train.jsonl";
    pub const TEST_FILE: &'static str = "test.jsonl";
    pub const CATALOG_FILE: &'static str = "catalog.bin";

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(Self::TRAIN_FILE), &self.train)?;
        write_jsonl(&dir.join(Self::TEST_FILE), &self.test)?;
        self.catalog.save(&dir.join(Self::CATALOG_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ds = Dataset {
            train: read_jsonl(&dir.join(Self::TRAIN_FILE))?,
            test: read_jsonl(&dir.join(Self::TEST_FILE))?,
            catalog: ImageCatalog::load(&dir.join(Self::CATALOG_FILE))?,
        };
        for s in ds.train.iter().chain(&ds.test) {
            let imp = &s.impression;
            let pics = std::iter::once(imp.pic_id).chain(imp.behaviors.iter().map(|b| b.pic_id));
            for pic in pics {
                if ds.catalog.get(pic).is_none() {
                    return Err(Error::Format(format!("pic id {pic} missing from catalog")));
                }
            }
        }
        Ok(ds)
    }
}

struct UserProfile {
    categories: Vec<usize>,
    weights: Vec<f64>,
    taste: [f64; 3],
}

fn pick_weighted(rng: &mut impl Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if r < *w {
            return i;
        }
        r -= w;
    }
    weights.len() - 1
}

fn user_profile(rng: &mut impl Rng, cfg: &SyntheticConfig) -> UserProfile {
    let mut cats: Vec<usize> = (0..cfg.num_categories).collect();
    cats.shuffle(rng);
    cats.truncate(2);
    let major = rng.random_range(0.55..0.85);
    UserProfile {
        categories: cats,
        weights: vec![major, 1.0 - major],
        taste: [
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
        ],
    }
}

/// Builds train and test splits over disjoint users plus the image catalog.
/// The result is a pure function of `cfg`.
pub fn gen_dataset(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let catalog = gen_catalog(cfg)?;
    let clicks = ClickModel::new(&catalog, cfg);
    let styles: Vec<Style> = (0..cfg.num_images() as u64)
        .map(|pic| Style::from_seed(cfg.style_seed(pic)))
        .collect();
    let ipc = cfg.images_per_category;
    let n_test = ((cfg.users as f64) * cfg.test_user_fraction).round() as usize;
    let n_train = cfg.users - n_test;

    let mut train = Vec::new();
    let mut test = Vec::new();
    for user in 0..cfg.users as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_USER + user));
        let profile = user_profile(&mut rng, cfg);
        let taste_affinity = |pic: usize| {
            let d2: f64 = styles[pic].color.iter().zip(&profile.taste).map(|(a, b)| (a - b).powi(2)).sum();
            (-d2 / (2.0 * cfg.taste_width * cfg.taste_width)).exp() + 1e-6
        };
        let len = rng.random_range(cfg.min_behaviors..=cfg.max_behaviors);
        let behaviors: Vec<Behavior> = (0..len)
            .map(|_| {
                let cat = profile.categories[pick_weighted(&mut rng, &profile.weights)];
                let weights: Vec<f64> = (0..ipc).map(|j| taste_affinity(cat * ipc + j)).collect();
                let pic = cat * ipc + pick_weighted(&mut rng, &weights);
                Behavior {
                    pic_id: pic as u64,
                    category: cat as u32,
                }
            })
            .collect();
        let out = if (user as usize) < n_train { &mut train } else { &mut test };
        for _ in 0..cfg.impressions_per_user {
            let cat = if rng.random_bool(cfg.in_mixture_rate) {
                profile.categories[pick_weighted(&mut rng, &profile.weights)]
            } else {
                rng.random_range(0..cfg.num_categories)
            };
            let pic = (cat * ipc + rng.random_range(0..ipc)) as u64;
            let impression = Impression {
                user_id: user,
                context_ids: (0..cfg.context_fields)
                    .map(|_| rng.random_range(0..cfg.context_cardinality))
                    .collect(),
                item_id: pic,
                pic_id: pic,
                category: cat as u32,
                behaviors: behaviors.clone(),
            };
            let p = clicks.click_probability(&impression);
            let label = u8::from(rng.random_bool(p));
            out.push(Sample { impression, label });
        }
    }
    let train = downsample_negatives(&train, cfg.train_negative_rate, derive_seed(cfg.seed, STREAM_DOWNSAMPLE))?;
    Ok(Dataset { train, test, catalog })
}

/// Keeps every positive and each negative independently with probability
/// `rate`; relative order is preserved.
pub fn downsample_negatives(split: &[Sample], rate: f64, seed: u64) -> Result<Vec<Sample>> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::Config(format!("negative sampling rate {rate} must be in (0,1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(split
        .iter()
        .filter(|s| s.label == 1 || rate == 1.0 || rng.random_bool(rate))
        .cloned()
        .collect())
}

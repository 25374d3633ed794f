use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{ImageExtents, SyntheticConfig};
use crate::error::{Error, Result};

/// The four ablation variants, from the id-only baseline to the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "DIN")]
    Din,
    #[serde(rename = "DIN+FixedCNN")]
    DinFixedCnn,
    #[serde(rename = "HCM")]
    Hcm,
    #[serde(rename = "HCCM")]
    Hccm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Din, Variant::DinFixedCnn, Variant::Hcm, Variant::Hccm];

    pub fn has_visual(self) -> bool {
        self != Variant::Din
    }

    pub fn is_hybrid(self) -> bool {
        matches!(self, Variant::Hcm | Variant::Hccm)
    }

    pub fn uses_prior(self) -> bool {
        self == Variant::Hccm
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Din => "DIN",
            Variant::DinFixedCnn => "DIN+FixedCNN",
            Variant::Hcm => "HCM",
            Variant::Hccm => "HCCM",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "din" => Ok(Variant::Din),
            "dinfixedcnn" | "fixedcnn" => Ok(Variant::DinFixedCnn),
            "hcm" => Ok(Variant::Hcm),
            "hccm" => Ok(Variant::Hccm),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (expected DIN, DIN+FixedCNN, HCM or HCCM)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    /// Output channels of each frozen stride-2 stage.
    pub fixed_channels: Vec<usize>,
    pub fixed_kernel: usize,
    pub fixed_stride: usize,
    /// Seed of the frozen weights, independent of the training seed.
    pub fixed_seed: u64,
    pub trainable_hidden: usize,
    /// Width `dv` of the pooled per-image representation.
    pub repr_dim: usize,
    pub trainable_kernel: usize,
    /// Channel-attention bottleneck is `max(c / attn_reduction, attn_min_hidden)`.
    pub attn_reduction: usize,
    pub attn_min_hidden: usize,
    pub num_categories: usize,
    pub embed_dim: usize,
    /// Each hashed table has `2^table_bits` rows.
    pub table_bits: u32,
    pub context_fields: usize,
    /// Hidden widths of the prediction head.
    pub hidden: Vec<usize>,
    /// Behavior truncation length (most recent kept).
    pub max_behaviors: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 32,
            image_width: 32,
            image_channels: 3,
            fixed_channels: vec![8, 12, 16],
            fixed_kernel: 3,
            fixed_stride: 2,
            fixed_seed: 0x0f1c_ed00_c0ff_ee00,
            trainable_hidden: 16,
            repr_dim: 32,
            trainable_kernel: 3,
            attn_reduction: 4,
            attn_min_hidden: 4,
            num_categories: 8,
            embed_dim: 8,
            table_bits: 12,
            context_fields: 2,
            hidden: vec![400, 160, 80],
            max_behaviors: 10,
        }
    }
}

/// Extents of a frozen-CNN feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapExtents {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl MapExtents {
    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.area() * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ModelConfig {
    /// Copies image extents, category count and context width from a data config.
    pub fn matching(data: &SyntheticConfig) -> Self {
        ModelConfig {
            image_height: data.image_height,
            image_width: data.image_width,
            image_channels: data.image_channels,
            num_categories: data.num_categories,
            context_fields: data.context_fields,
            max_behaviors: data.max_behaviors,
            ..ModelConfig::default()
        }
    }

    pub fn image_extents(&self) -> ImageExtents {
        ImageExtents {
            height: self.image_height,
            width: self.image_width,
            channels: self.image_channels,
        }
    }

    pub fn feature_extents(&self) -> MapExtents {
        let (mut h, mut w) = (self.image_height, self.image_width);
        for _ in &self.fixed_channels {
            h = h.div_ceil(self.fixed_stride);
            w = w.div_ceil(self.fixed_stride);
        }
        MapExtents {
            height: h,
            width: w,
            channels: *self.fixed_channels.last().unwrap_or(&self.image_channels),
        }
    }

    /// Small configuration for exhaustive gradient checks: 8x8x3 images,
    /// 2x2x8 frozen maps, a 4-slot behavior window.
    pub fn toy() -> Self {
        ModelConfig {
            image_height: 8,
            image_width: 8,
            image_channels: 3,
            fixed_channels: vec![4, 8],
            trainable_hidden: 4,
            repr_dim: 6,
            num_categories: 3,
            embed_dim: 3,
            table_bits: 4,
            context_fields: 1,
            hidden: vec![6, 4],
            max_behaviors: 4,
            ..ModelConfig::default()
        }
    }

    pub fn attn_hidden(&self) -> usize {
        (self.feature_extents().channels / self.attn_reduction).max(self.attn_min_hidden)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.image_height == 0 || self.image_width == 0 || self.image_channels == 0 {
            return fail("image extents must be positive");
        }
        if self.fixed_channels.is_empty() || self.fixed_channels.contains(&0) {
            return fail("fixed_channels must list at least one positive width");
        }
        if self.fixed_kernel == 0 || self.fixed_stride == 0 || self.trainable_kernel == 0 {
            return fail("kernel extents and strides must be positive");
        }
        if self.trainable_hidden == 0 || self.repr_dim == 0 || self.embed_dim == 0 {
            return fail("trainable_hidden, repr_dim and embed_dim must be positive");
        }
        if self.attn_reduction == 0 || self.attn_min_hidden == 0 {
            return fail("attention bottleneck settings must be positive");
        }
        if self.num_categories < 1 || self.num_categories > u16::MAX as usize {
            return fail("num_categories must be in 1..=65535");
        }
        if !(1..=24).contains(&self.table_bits) {
            return fail("table_bits must be in 1..=24");
        }
        if self.hidden.contains(&0) {
            return fail("hidden widths must be positive");
        }
        if self.max_behaviors == 0 {
            return fail("max_behaviors must be positive");
        }
        Ok(())
    }
}

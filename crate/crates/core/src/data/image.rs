use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CATALOG_MAGIC: &[u8; 4] = b"IMGC";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageExtents {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageExtents {
    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-image appearance drawn from the style seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Style {
    pub color: [f64; 3],
    pub phase: f64,
}

impl Style {
    pub fn from_seed(style_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
        let color = [
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
            rng.random_range(0.2..0.8),
        ];
        Style {
            color,
            phase: rng.random_range(0.0..2.0 * PI),
        }
    }
}

/// Parametric stripe image: orientation and frequency come from the category,
/// base color and phase from the style seed, plus seeded pixel noise.
///
/// Pixels are clamped to [0,1] and rounded to `f32` precision so an image
/// survives the catalog file unchanged.
pub fn gen_image(category: usize, num_categories: usize, style_seed: u64, extents: ImageExtents, noise: f64) -> Tensor {
    let style = Style::from_seed(style_seed);
    let theta = PI * category as f64 / num_categories as f64;
    let freq = 2.0 + (category % 3) as f64;
    let (ct, st) = (theta.cos(), theta.sin());
    let mut rng = ChaCha8Rng::seed_from_u64(style_seed ^ 0x6e6f_6973_6500_0000);
    let ImageExtents { height, width, channels } = extents;
    let mut data = Vec::with_capacity(extents.len());
    for y in 0..height {
        for x in 0..width {
            let u = (x as f64 * ct + y as f64 * st) / width as f64;
            let stripe = 0.25 * (2.0 * PI * freq * u + style.phase).sin();
            for c in 0..channels {
                let base = style.color[c % 3];
                let n: f64 = if noise > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
                let v = (base + stripe + noise * 0.25 * n).clamp(0.0, 1.0);
                data.push(v as f32 as f64);
            }
        }
    }
    Tensor::new(&extents.shape(), data).expect("extents")
}

#[derive(Clone, Debug, PartialEq)]
pub struct CatalogEntry {
    pub pic_id: u64,
    pub category: u32,
    pub image: Tensor,
}

/// Dense pic id -> (image, category) map; pic ids are `0..len`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageCatalog {
    extents: ImageExtents,
    entries: Vec<CatalogEntry>,
}

impl ImageCatalog {
    pub fn new(extents: ImageExtents, entries: Vec<CatalogEntry>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if e.pic_id != i as u64 {
                return Err(Error::Format(format!("catalog ids must be dense, found {} at {i}", e.pic_id)));
            }
            if e.image.shape() != extents.shape() {
                return Err(Error::shape(format!(
                    "catalog image {} has shape {:?}, expected {:?}",
                    e.pic_id,
                    e.image.shape(),
                    extents.shape()
                )));
            }
            if e.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Format(format!("image {} has pixels outside [0,1]", e.pic_id)));
            }
        }
        Ok(ImageCatalog { extents, entries })
    }

    pub fn extents(&self) -> ImageExtents {
        self.extents
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, pic_id: u64) -> Option<&CatalogEntry> {
        self.entries.get(usize::try_from(pic_id).ok()?)
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.entries.len() * (26 + 4 * self.extents.len()));
        out.extend_from_slice(CATALOG_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&e.pic_id.to_le_bytes());
            out.extend_from_slice(&(e.category as u16).to_le_bytes());
            for d in self.extents.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in e.image.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CATALOG_MAGIC {
            return Err(Error::Format("not an image catalog (bad magic)".into()));
        }
        let count = read_u64(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count);
        let mut extents = None;
        for _ in 0..count {
            let pic_id = read_u64(&mut r)?;
            let mut cat = [0u8; 2];
            r.read_exact(&mut cat)?;
            let ext = ImageExtents {
                height: read_u32(&mut r)? as usize,
                width: read_u32(&mut r)? as usize,
                channels: read_u32(&mut r)? as usize,
            };
            if *extents.get_or_insert(ext) != ext {
                return Err(Error::Format("catalog images have mixed extents".into()));
            }
            let mut data = Vec::with_capacity(ext.len());
            for _ in 0..ext.len() {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                data.push(f32::from_le_bytes(b) as f64);
            }
            entries.push(CatalogEntry {
                pic_id,
                category: u16::from_le_bytes(cat) as u32,
                image: Tensor::new(&ext.shape(), data)?,
            });
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after catalog".into()));
        }
        let extents = extents.ok_or_else(|| Error::Format("empty catalog".into()))?;
        ImageCatalog::new(extents, entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

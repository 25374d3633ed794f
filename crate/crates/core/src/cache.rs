//! Precomputed frozen-CNN feature maps.
//!
//! File layout (little-endian): `"FMC1"`, `u32` version, `u32` w, h, c,
//! `u64` count, `u64` frozen-parameter checksum, then per entry a `u64` pic
//! id followed by `h*w*c` `f32` values in `[h, w, c]` order.

use std::borrow::Cow;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::data::{read_u32, read_u64, ImageCatalog};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{FeatureSource, HccmModel, MapExtents};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FMC1";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct FeatureMapCache {
    extents: MapExtents,
    checksum: u64,
    ids: Vec<u64>,
    maps: Vec<Tensor>,
    index: HashMap<u64, usize>,
}

impl FeatureMapCache {
    /// Runs the frozen stack once per catalog image.
    pub fn precompute(model: &HccmModel, catalog: &ImageCatalog) -> Result<Self> {
        let extents = model.feature_extents();
        let mut ids = Vec::with_capacity(catalog.len());
        let mut maps = Vec::with_capacity(catalog.len());
        for e in catalog.entries() {
            ids.push(e.pic_id);
            maps.push(model.fixed_cnn_forward(&e.image)?);
        }
        Self::from_parts(extents, model.fixed_checksum(), ids, maps)
    }

    fn from_parts(extents: MapExtents, checksum: u64, ids: Vec<u64>, maps: Vec<Tensor>) -> Result<Self> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(Error::Format(format!("duplicate pic id {id} in feature cache")));
            }
        }
        Ok(FeatureMapCache {
            extents,
            checksum,
            ids,
            maps,
            index,
        })
    }

    pub fn extents(&self) -> MapExtents {
        self.extents
    }

    /// Checksum of the frozen weights that produced the entries.
    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn pic_ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn lookup(&self, pic_id: u64) -> Result<&Tensor> {
        self.index
            .get(&pic_id)
            .map(|&i| &self.maps[i])
            .ok_or(Error::CacheMiss(pic_id))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let e = self.extents;
        let mut out = Vec::with_capacity(32 + self.len() * (8 + 4 * e.len()));
        out.extend_from_slice(MAGIC);
        for v in [VERSION, e.width as u32, e.height as u32, e.channels as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.checksum.to_le_bytes());
        for (id, map) in self.ids.iter().zip(&self.maps) {
            out.extend_from_slice(&id.to_le_bytes());
            for &v in map.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parses a cache and rejects it unless its checksum equals `expected`.
    pub fn from_bytes(bytes: &[u8], expected_checksum: u64) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a feature-map cache (bad magic)".into()));
        }
        let mut r = &bytes[4..];
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported cache version {version}")));
        }
        let width = read_u32(&mut r)? as usize;
        let height = read_u32(&mut r)? as usize;
        let channels = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let checksum = read_u64(&mut r)?;
        if checksum != expected_checksum {
            return Err(Error::StaleCache {
                expected: expected_checksum,
                found: checksum,
            });
        }
        let extents = MapExtents { height, width, channels };
        let n = extents.len();
        if r.len() != count.saturating_mul(8 + 4 * n) {
            return Err(Error::Format(format!(
                "cache body is {} bytes, header implies {count} entries of {} values",
                r.len(),
                n
            )));
        }
        let mut ids = Vec::with_capacity(count);
        let mut maps = Vec::with_capacity(count);
        for _ in 0..count {
            ids.push(read_u64(&mut r)?);
            let data = r[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            r = &r[4 * n..];
            maps.push(Tensor::new(&extents.shape(), data)?);
        }
        Self::from_parts(extents, checksum, ids, maps)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    /// Loads a cache built by the frozen weights of `model`.
    pub fn load(path: &Path, model: &HccmModel) -> Result<Self> {
        let cache = Self::from_bytes(&fs::read(path)?, model.fixed_checksum())?;
        if cache.extents != model.feature_extents() {
            return Err(Error::shape(format!(
                "cache maps are {:?}, model expects {:?}",
                cache.extents,
                model.feature_extents()
            )));
        }
        Ok(cache)
    }
}

impl FeatureSource for FeatureMapCache {
    fn feature_map(&self, pic_id: u64) -> Result<Cow<'_, Tensor>> {
        self.lookup(pic_id).map(Cow::Borrowed)
    }
}

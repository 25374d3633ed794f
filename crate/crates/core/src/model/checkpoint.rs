//! Binary checkpoint: `"HCCM"`, version, variant, every extent hyperparameter,
//! then one block per parameter in declaration order (`u64` count followed by
//! 32-bit little-endian floats).

use std::fs;
use std::path::Path;

use super::config::{ModelConfig, Variant};
use super::hccm::HccmModel;
use crate::data::{read_u32, read_u64};
use crate::error::{Error, Result};
use crate::io::write_atomic;

const MAGIC: &[u8; 4] = b"HCCM";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_list(out: &mut Vec<u8>, v: &[usize]) {
    put_u32(out, v.len());
    v.iter().for_each(|&x| put_u32(out, x));
}

fn get(r: &mut &[u8]) -> Result<usize> {
    Ok(read_u32(r)? as usize)
}

fn get_list(r: &mut &[u8]) -> Result<Vec<usize>> {
    let n = get(r)?;
    if n > 1024 {
        return Err(Error::Format(format!("implausible list length {n} in checkpoint header")));
    }
    (0..n).map(|_| get(r)).collect()
}

impl HccmModel {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let c = self.config();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.variant().code());
        put_u32(&mut out, c.image_height);
        put_u32(&mut out, c.image_width);
        put_u32(&mut out, c.image_channels);
        put_list(&mut out, &c.fixed_channels);
        put_u32(&mut out, c.fixed_kernel);
        put_u32(&mut out, c.fixed_stride);
        out.extend_from_slice(&c.fixed_seed.to_le_bytes());
        put_u32(&mut out, c.trainable_hidden);
        put_u32(&mut out, c.repr_dim);
        put_u32(&mut out, c.trainable_kernel);
        put_u32(&mut out, c.attn_reduction);
        put_u32(&mut out, c.attn_min_hidden);
        put_u32(&mut out, c.num_categories);
        put_u32(&mut out, c.embed_dim);
        put_u32(&mut out, c.table_bits as usize);
        put_u32(&mut out, c.context_fields);
        put_list(&mut out, &c.hidden);
        put_u32(&mut out, c.max_behaviors);
        put_u32(&mut out, self.params().len());
        for (_, p) in self.params().iter() {
            out.extend_from_slice(&(p.value.len() as u64).to_le_bytes());
            for v in p.value.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        if r.len() < 9 || &r[..4] != MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        r = &r[4..];
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let variant = Variant::from_code(r[0]).ok_or_else(|| Error::Format(format!("unknown variant code {}", r[0])))?;
        r = &r[1..];
        let config = ModelConfig {
            image_height: get(&mut r)?,
            image_width: get(&mut r)?,
            image_channels: get(&mut r)?,
            fixed_channels: get_list(&mut r)?,
            fixed_kernel: get(&mut r)?,
            fixed_stride: get(&mut r)?,
            fixed_seed: read_u64(&mut r)?,
            trainable_hidden: get(&mut r)?,
            repr_dim: get(&mut r)?,
            trainable_kernel: get(&mut r)?,
            attn_reduction: get(&mut r)?,
            attn_min_hidden: get(&mut r)?,
            num_categories: get(&mut r)?,
            embed_dim: get(&mut r)?,
            table_bits: read_u32(&mut r)?,
            context_fields: get(&mut r)?,
            hidden: get_list(&mut r)?,
            max_behaviors: get(&mut r)?,
        };
        let mut model = HccmModel::new(config, variant, 0)?;
        let count = get(&mut r)?;
        if count != model.params().len() {
            return Err(Error::Format(format!(
                "checkpoint has {count} parameter blocks, architecture needs {}",
                model.params().len()
            )));
        }
        let ids: Vec<_> = model.params().ids().collect();
        for id in ids {
            let n = read_u64(&mut r)? as usize;
            let dst = model.params_mut().value_mut(id);
            if n != dst.len() {
                return Err(Error::Format(format!(
                    "parameter block {} holds {n} values, expected {}",
                    id.index(),
                    dst.len()
                )));
            }
            if r.len() < 4 * n {
                return Err(Error::Format("truncated parameter block".into()));
            }
            for (v, chunk) in dst.data_mut().iter_mut().zip(r[..4 * n].chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            }
            r = &r[4 * n..];
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_checkpoint_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&fs::read(path)?)
    }
}

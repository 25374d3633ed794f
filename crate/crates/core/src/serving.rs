//! Lookup-table serving: per-image representations are computed offline so
//! that request time runs only behavior attention and the head MLP.
//!
//! Table layout (little-endian): `"REPT"`, `u32` version, `u32` dv, `u64`
//! count, `u64` model checksum, then per entry a `u64` pic id followed by
//! `dv` `f32` values.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_u32, read_u64, ImageCatalog, Impression};
use crate::error::{Error, Result};
use crate::hash::fnv64;
use crate::io::write_atomic;
use crate::model::{FeatureSource, HccmModel, RepresentationSource, Variant, VisualInput};
use crate::tensor::Graph;

const MAGIC: &[u8; 4] = b"REPT";
const VERSION: u32 = 1;
const EXPORT_CHUNK: usize = 64;
/// Magic, version, dv, count, model checksum.
pub const HEADER_LEN: usize = 28;

#[derive(Clone, Debug)]
pub struct RepresentationTable {
    dim: usize,
    model_checksum: u64,
    ids: Vec<u64>,
    data: Vec<f64>,
    index: HashMap<u64, usize>,
}

impl RepresentationTable {
    /// Runs the visual path of `model` for every catalog image under its own
    /// category.
    pub fn export(model: &HccmModel, catalog: &ImageCatalog, maps: &dyn FeatureSource) -> Result<Self> {
        let dim = match model.variant() {
            Variant::Din => return Err(Error::UnsupportedVariant("DIN has no visual representation".into())),
            _ => model.repr_dim().expect("visual variant has a representation width"),
        };
        let images: Vec<(u64, u32)> = catalog.entries().iter().map(|e| (e.pic_id, e.category as u32)).collect();
        let mut data = Vec::with_capacity(images.len() * dim);
        for chunk in images.chunks(EXPORT_CHUNK) {
            let mut g = Graph::with_params(model.params());
            let reps = model.representations(&mut g, chunk, maps)?;
            // Stored precision, so a loaded table equals the exported one.
            data.extend(g.value(reps).data().iter().map(|&v| v as f32 as f64));
        }
        Self::from_parts(dim, model.checksum(), images.iter().map(|&(id, _)| id).collect(), data)
    }

    fn from_parts(dim: usize, model_checksum: u64, ids: Vec<u64>, data: Vec<f64>) -> Result<Self> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if index.insert(id, i).is_some() {
                return Err(Error::Format(format!("duplicate pic id {id} in representation table")));
            }
        }
        Ok(RepresentationTable {
            dim,
            model_checksum,
            ids,
            data,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checksum of the checkpoint the table was exported from.
    pub fn model_checksum(&self) -> u64 {
        self.model_checksum
    }

    /// Checksum of the serialized table.
    pub fn checksum(&self) -> u64 {
        fnv64(&self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (8 + 4 * self.dim));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.model_checksum.to_le_bytes());
        for (id, row) in self.ids.iter().zip(self.data.chunks_exact(self.dim.max(1))) {
            out.extend_from_slice(&id.to_le_bytes());
            for v in row {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a representation table (bad magic)".into()));
        }
        let mut r = &bytes[4..];
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported table version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let count = read_u64(&mut r)? as usize;
        let model_checksum = read_u64(&mut r)?;
        if dim == 0 || r.len() != count.saturating_mul(8 + 4 * dim) {
            return Err(Error::Format(format!("table body does not hold {count} entries of width {dim}")));
        }
        let mut ids = Vec::with_capacity(count);
        let mut data = Vec::with_capacity(count * dim);
        for _ in 0..count {
            ids.push(read_u64(&mut r)?);
            data.extend(r[..4 * dim].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64));
            r = &r[4 * dim..];
        }
        Self::from_parts(dim, model_checksum, ids, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl RepresentationSource for RepresentationTable {
    fn representation(&self, pic_id: u64) -> Result<&[f64]> {
        let &i = self.index.get(&pic_id).ok_or(Error::TableMiss(pic_id))?;
        Ok(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub ctr: f64,
    pub model_checksum: String,
    pub table_checksum: String,
}

/// Read-only model plus table; safe to share across request handlers.
pub struct Predictor {
    model: HccmModel,
    table: RepresentationTable,
    model_checksum: String,
    table_checksum: String,
}

impl Predictor {
    /// Fails when the table was exported from a different checkpoint.
    pub fn new(model: HccmModel, table: RepresentationTable) -> Result<Self> {
        if model.variant() == Variant::Din {
            return Err(Error::UnsupportedVariant("DIN is served without a table".into()));
        }
        let found = model.checksum();
        if table.model_checksum() != found {
            return Err(Error::ChecksumMismatch {
                expected: table.model_checksum(),
                found,
            });
        }
        if Some(table.dim) != model.repr_dim() {
            return Err(Error::shape(format!(
                "table width {} does not match model width {:?}",
                table.dim,
                model.repr_dim()
            )));
        }
        Ok(Predictor {
            model_checksum: format!("{found:016x}"),
            table_checksum: format!("{:016x}", table.checksum()),
            model,
            table,
        })
    }

    pub fn model(&self) -> &HccmModel {
        &self.model
    }

    pub fn table(&self) -> &RepresentationTable {
        &self.table
    }

    pub fn predict(&self, request: &Impression) -> Result<PredictResponse> {
        let ctr = self
            .model
            .predict(request, Some(VisualInput::Representations(&self.table)))?;
        Ok(PredictResponse {
            ctr,
            model_checksum: self.model_checksum.clone(),
            table_checksum: self.table_checksum.clone(),
        })
    }

    /// Parses one JSON request and returns the JSON response line.
    pub fn handle_line(&self, line: &str) -> String {
        let result = serde_json::from_str::<Impression>(line)
            .map_err(Error::from)
            .and_then(|req| self.predict(&req));
        match result {
            Ok(resp) => serde_json::to_string(&resp).expect("response serializes"),
            Err(e) => serde_json::json!({ "error": e.to_string() }).to_string(),
        }
    }

    /// Newline-delimited replay: one response line per non-blank request
    /// line. Returns (answered, rejected).
    pub fn replay(&self, input: impl BufRead, mut output: impl Write) -> Result<(usize, usize)> {
        let (mut ok, mut rejected) = (0, 0);
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let resp = self.handle_line(&line);
            if resp.starts_with("{\"error\"") {
                rejected += 1;
            } else {
                ok += 1;
            }
            writeln!(output, "{resp}")?;
        }
        output.flush()?;
        Ok((ok, rejected))
    }
}

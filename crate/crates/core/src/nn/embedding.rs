use rand::Rng;

use crate::error::{Error, Result};
use crate::hash::{hash_id, splitmix64};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Hashed embedding table: `row = hash(id, seed) mod size`, `size` a power of two.
///
/// Colliding ids share a row.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub param: ParamId,
    size: usize,
    dim: usize,
    seed: u64,
}

impl EmbeddingTable {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        size: usize,
        dim: usize,
        seed: u64,
        init_scale: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !size.is_power_of_two() || dim == 0 {
            return Err(Error::Config(format!(
                "embedding table {name}: size {size} must be a power of two and dim positive"
            )));
        }
        let data = (0..size * dim)
            .map(|_| rng.random_range(-init_scale..=init_scale))
            .collect();
        let param = store.add(name, Tensor::new(&[size, dim], data)?, false);
        Ok(EmbeddingTable {
            param,
            size,
            dim,
            seed,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn row(&self, id: u64) -> usize {
        (hash_id(id, self.seed) & (self.size as u64 - 1)) as usize
    }

    /// Row for an id of the given feature field; fields sharing one table
    /// hash into independent positions.
    pub fn field_row(&self, field: usize, id: u64) -> usize {
        (hash_id(id, self.seed ^ splitmix64(field as u64 + 1)) & (self.size as u64 - 1)) as usize
    }

    /// `[ids.len(), dim]` rows.
    pub fn lookup(&self, g: &mut Graph, ids: &[u64]) -> Result<Var> {
        let rows: Vec<usize> = ids.iter().map(|&id| self.row(id)).collect();
        g.embed(self.param, &rows)
    }

    /// Single `[dim]` vector.
    pub fn embed(&self, g: &mut Graph, id: u64) -> Result<Var> {
        let v = self.lookup(g, &[id])?;
        g.reshape(v, &[self.dim])
    }
}

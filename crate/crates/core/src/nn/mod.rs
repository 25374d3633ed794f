//! Parameterized building blocks shared by every model variant.

mod attention;
mod embedding;
mod mlp;

pub use attention::{attention, batched_attention};
pub use embedding::EmbeddingTable;
pub use mlp::{Dense, Mlp};

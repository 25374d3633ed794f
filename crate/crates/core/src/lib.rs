//! Hybrid fixed/trainable CNN attention with a category prior for
//! click-through-rate prediction over user image behaviors.

pub mod ablation;
pub mod cache;
pub mod data;
pub mod error;
pub mod hash;
pub mod io;
pub mod model;
pub mod nn;
pub mod serving;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

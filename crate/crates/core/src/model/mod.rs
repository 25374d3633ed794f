//! The four ablation variants: DIN, DIN+FixedCNN, HCM and HCCM.

mod checkpoint;
mod config;
mod gradcheck;
mod hccm;

pub use config::{MapExtents, ModelConfig, Variant};
pub use gradcheck::{toy_gradcheck, GRADCHECK_EPS};
pub use hccm::{ConvLayer, FeatureSource, HccmModel, OnTheFly, RepresentationSource, VisualInput};

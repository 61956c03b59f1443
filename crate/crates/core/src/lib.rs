//! Classification with a frozen ViT-style encoder whose intermediate features
//! gate a small CNN through spatially localized channel attention (SLCA).

pub mod checks;
pub mod data;
pub mod digest;
pub mod encoder;
pub mod error;
pub mod model;
pub mod nn;
pub mod slca;
pub mod tensor;
pub mod train;
pub mod viz;

pub use encoder::{Encoder, EncoderConfig, EncoderTapSet, TapName};
pub use error::{Error, Result};
pub use model::{BackboneConfig, Model, ModelSpec, ProjectorConfig, Variant};
pub use slca::{SlcaBlock, SlcaConfig};
pub use tensor::{FeatureMap, Matrix, Module, Param, Scalar};

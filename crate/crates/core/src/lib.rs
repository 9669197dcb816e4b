//! Configurable semantic-segmentation stack built from first principles:
//! tensor primitives with checked gradients, an adapted MobileNetV2 backbone
//! with GPP/SPP/ASPP context heads and optional decoder shortcut, an SGD
//! training loop with polynomial decay, confusion-matrix metrics, synthetic
//! visibility impairments with sweep protocols, and LabelMe-style polygon
//! annotation tooling.

pub mod annotation;
pub mod error;
pub mod graph;
pub mod impair;
pub mod map;
pub mod metrics;
pub mod tensor;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
pub use map::{ClassMap, IGNORE_INDEX};
pub use tensor::{Shape, Tensor};

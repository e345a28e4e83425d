//! Minimal reverse-mode autodiff and the layer set used by the models.

mod adam;
mod conv;
mod graph;
mod layer;
mod tensor;

pub use adam::Adam;
pub use conv::ConvGeom;
pub use graph::{Graph, Var};
pub use layer::LayerSpec;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;

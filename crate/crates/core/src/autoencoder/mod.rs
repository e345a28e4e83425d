//! Conv + FC autoencoders with tanh, nested dropout or vector-quantized
//! latents, trained with Adam and early stopping.

pub(crate) mod io;
mod model;
mod nd;
mod search;
mod train;

pub use model::{AeModel, ArchConfig, Forward, Mode, Variant};
pub use nd::{apply_nested_dropout, default_nd_p, nd_mask, sample_nd_index, truncated_geometric_mean};
pub use search::{random_search, SearchSpace, SearchResult, Trial};
pub use train::{mean_nmse, train, train_on_dataset, validation_nmse, EpochRecord, TrainConfig, TrainOutcome};

#[cfg(test)]
mod tests;

//! Post-training scalar quantization of ordered latents: per-unit k-means
//! distortion tables, greedy bit allocation and per-unit codebooks.

mod alloc;
mod codebook;
mod kmeans;

pub use alloc::{build_distortion_table, columns, greedy_allocate, BitAllocation, DistortionTable, MAX_UNIT_BITS};
pub(crate) use codebook::{read_codebook_header, CODEBOOK_MAGIC, CODEBOOK_VERSION};
pub use codebook::{build_codebooks, uniform_baseline, ScalarCodebookSet};
pub use kmeans::{kmeans_1d, kmeans_ladder, nearest, sse_nearest, KMeans1d};

/// Seed of the k-means runs for one latent unit.
pub(crate) fn unit_seed(seed: u64, unit: usize) -> u64 {
    crate::rng::derive_seed(seed, "unit", unit as u64)
}

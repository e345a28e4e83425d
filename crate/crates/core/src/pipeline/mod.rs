//! Config-driven experiment runs and their comparison.

mod books;
mod config;
mod manifest;
mod run;

pub use books::Books;
pub use config::{ModelConfig, QuantizerConfig, RunConfig, SearchConfig};
pub use manifest::{compare, Artifact, RunManifest, SlimSummary, SummaryRow};
pub use run::{evaluate_latents, history_csv, run_experiment, slim_summary, summary_csv, trials_csv};

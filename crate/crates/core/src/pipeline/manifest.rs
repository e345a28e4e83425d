use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{sha256_hex, RunConfig};
use crate::autoencoder::Variant;
use crate::error::{config_err, format_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
}

/// Aggregate DL-test metrics of one quantization method at one budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// `noquant`, `greedy`, `uniform` or `vq`.
    pub method: String,
    pub budget: Option<usize>,
    pub mean_nmse: f64,
    pub nmse_db_of_mean: f64,
    pub mean_nmse_db: f64,
    pub mean_rho: f64,
    pub one_minus_rho_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlimSummary {
    pub encoder_flops: u64,
    pub encoder_conv_flops: u64,
    pub offload_bits: u64,
    /// Offload bits of the same model with dense f32 layers and `g = 1`.
    pub reference_offload_bits: u64,
    pub offload_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub label: String,
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub scenario_hash: String,
    /// `ok`, `failed` or `dry-run`.
    pub status: String,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub artifacts: Vec<Artifact>,
    pub versions: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
    pub results: Vec<SummaryRow>,
    pub slimming: Option<SlimSummary>,
}

impl RunManifest {
    pub(crate) fn new(cfg: &RunConfig, status: &str) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("csiq-core".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("manifest".to_string(), "1".to_string());
        Self {
            label: cfg.label(),
            variant: cfg.variant,
            seed: cfg.seed,
            config_hash: cfg.hash(),
            scenario_hash: cfg.scenario_hash(),
            status: status.to_string(),
            failed_stage: None,
            error: None,
            artifacts: Vec::new(),
            versions,
            wall_clock_secs: 0.0,
            results: Vec::new(),
            slimming: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| format_err!("{}: {}", path.display(), e))
    }

    /// Check every listed artifact against its recorded hash.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for a in &self.artifacts {
            let bytes = std::fs::read(dir.join(&a.path))
                .map_err(|e| format_err!("artifact {} unreadable: {}", a.path, e))?;
            if sha256_hex(&bytes) != a.sha256 {
                return Err(format_err!("artifact {} does not match its recorded hash", a.path));
            }
        }
        Ok(())
    }

    /// The method reported in comparison tables for this variant.
    pub fn primary_method(&self) -> &'static str {
        match self.variant {
            Variant::Ae => "uniform",
            Variant::Nd => "greedy",
            Variant::Vq => "vq",
        }
    }

    pub fn result(&self, method: &str, budget: Option<usize>) -> Option<&SummaryRow> {
        self.results.iter().find(|r| r.method == method && r.budget == budget)
    }
}

/// One row per run: dB of the mean DL-test NMSE without quantization and at
/// each budget, plus encoder cost columns. Runs must share scenario and seed.
pub fn compare(manifests: &[RunManifest]) -> Result<String> {
    let Some(first) = manifests.first() else {
        return Err(config_err!("nothing to compare"));
    };
    for m in manifests {
        if m.status != "ok" {
            return Err(config_err!("run {} has status {}", m.label, m.status));
        }
        if m.scenario_hash != first.scenario_hash || m.seed != first.seed {
            return Err(config_err!(
                "run {} uses a different scenario or seed than run {}",
                m.label,
                first.label
            ));
        }
    }
    let budgets: BTreeSet<usize> = manifests
        .iter()
        .flat_map(|m| m.results.iter().filter_map(|r| r.budget))
        .collect();
    let mut s = String::from("label,variant,noquant_db");
    for b in &budgets {
        write!(s, ",b{}_db", b).unwrap();
    }
    s += ",encoder_flops,encoder_conv_flops,offload_bits,offload_reduction_pct\n";
    let cell = |r: Option<&SummaryRow>| r.map_or(String::new(), |r| format!("{:.4}", r.nmse_db_of_mean));
    for m in manifests {
        write!(s, "{},{},{}", m.label, m.variant.name(), cell(m.result("noquant", None))).unwrap();
        for &b in &budgets {
            write!(s, ",{}", cell(m.result(m.primary_method(), Some(b)))).unwrap();
        }
        match &m.slimming {
            Some(sl) => writeln!(
                s,
                ",{},{},{},{:.2}",
                sl.encoder_flops,
                sl.encoder_conv_flops,
                sl.offload_bits,
                100.0 * sl.offload_reduction
            )
            .unwrap(),
            None => s += ",,,,\n",
        }
    }
    Ok(s)
}

//! Run reports and content hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sdmd::Complex64;

use crate::config::Config;
use crate::error::{LabError, Result};

/// `[re, im]`.
pub type Pair = [f64; 2];

pub fn pair(z: Complex64) -> Pair {
    [z.re, z.im]
}

/// Outcome of one invariant check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantOutcome {
    pub name: String,
    pub passed: bool,
    /// Soft checks are reported but never fail a run.
    pub soft: bool,
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl InvariantOutcome {
    pub fn check(name: impl Into<String>, value: f64, tolerance: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed: value <= tolerance,
            soft: false,
            value,
            tolerance,
            detail: detail.into(),
        }
    }

    pub fn soft(mut self) -> Self {
        self.soft = true;
        self
    }
}

/// One row of the mode-matching table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRow {
    pub label: String,
    pub reference: Pair,
    pub estimate: Option<Pair>,
    pub error: Option<f64>,
}

/// Reference spectrum a method was matched against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchTable {
    /// `generator` (λ) or `semigroup` (μ).
    pub space: String,
    pub rows: Vec<MatchRow>,
    pub max_error: Option<f64>,
}

/// Values of the slowest eigenfunctions at one probe state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub point: Vec<f64>,
    /// Real parts, in slow-mode order.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub final_loss: f64,
    pub epochs: usize,
    pub selected_epoch: Option<usize>,
    pub selection_score: Option<f64>,
    pub rank: usize,
}

/// Spectrum of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub dictionary_size: usize,
    /// Storage order (descending `|μ|`).
    pub semigroup_eigs: Vec<Pair>,
    pub generator_eigs: Vec<Pair>,
    /// Indices ordered slowest first (ascending `|Re λ|`).
    pub slow_order: Vec<usize>,
    pub matches: Option<MatchTable>,
    pub probes: Vec<ProbeRow>,
    pub training: Option<TrainingSummary>,
}

impl MethodReport {
    /// Generator eigenvalues in slow order.
    pub fn slow_generator_eigs(&self) -> Vec<Complex64> {
        self.slow_order
            .iter()
            .map(|&k| Complex64::new(self.generator_eigs[k][0], self.generator_eigs[k][1]))
            .collect()
    }

    /// Semigroup eigenvalues in slow order.
    pub fn slow_semigroup_eigs(&self) -> Vec<Complex64> {
        self.slow_order
            .iter()
            .map(|&k| Complex64::new(self.semigroup_eigs[k][0], self.semigroup_eigs[k][1]))
            .collect()
    }
}

/// Summary of a convergence sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub kind: String,
    /// Named scalar outcomes, for example error ratios or slopes.
    pub metrics: BTreeMap<String, f64>,
    /// Named pass/fail outcomes of the sweep's own checks.
    pub checks: BTreeMap<String, bool>,
}

/// Similarity scores of the neural-mass comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralMassReport {
    pub samples: usize,
    pub regime_switches: usize,
    /// Per method: Pearson correlation of φ₂ with the latent input.
    pub phi2_scores: BTreeMap<String, f64>,
    pub phi3_scores: BTreeMap<String, f64>,
    pub sdmd_selected_epoch: Option<usize>,
    /// `|score| ≥ 0.8` for SDMD-DL.
    pub soft_target_met: bool,
    /// `|SDMD-DL score| ≥ |EDMD-DL score|`.
    pub sdmd_at_least_edmd: bool,
}

/// Everything a run produced, written as `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub command: String,
    pub config: Config,
    /// Git-style SHA-256 blob hashes of input files.
    pub input_hashes: BTreeMap<String, String>,
    /// Result files, relative to the output directory.
    pub outputs: Vec<PathBuf>,
    pub methods: Vec<MethodReport>,
    pub invariants: Vec<InvariantOutcome>,
    pub convergence: Option<ConvergenceReport>,
    pub neural_mass: Option<NeuralMassReport>,
    pub wall_clock_seconds: f64,
    pub deviations: Vec<String>,
}

impl Report {
    pub fn new(command: &str, config: &Config) -> Self {
        Self {
            command: command.to_string(),
            config: config.clone(),
            input_hashes: BTreeMap::new(),
            outputs: Vec::new(),
            methods: Vec::new(),
            invariants: Vec::new(),
            convergence: None,
            neural_mass: None,
            wall_clock_seconds: 0.0,
            deviations: Vec::new(),
        }
    }

    /// Failed hard invariants.
    pub fn failed_invariants(&self) -> Vec<&InvariantOutcome> {
        self.invariants.iter().filter(|o| !o.soft && !o.passed).collect()
    }

    pub fn method(&self, label: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == label)
    }

    /// Writes `report.json` atomically.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("report.json");
        let json = serde_json::to_string_pretty(self).map_err(|e| LabError::Other(e.to_string()))?;
        sdmd::io::write_atomic(&path, json.as_bytes()).map_err(|source| LabError::Stage {
            stage: "report",
            source,
        })?;
        Ok(path)
    }
}

/// SHA-256 of `blob <len>\0<bytes>`, the git object hash of a file.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hashes a file on disk.
pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
    Ok(blob_hash(&bytes))
}

//! JSON report schemas.
//!
//! All locations are given in standardized units (background mean 0, sd 1
//! per variable) and, where noted, in original units.

use std::path::Path;

use modalsig::agreement::ContingencyTable;
use modalsig::bwselect::Plateau;
use modalsig::modetest::ModeVerdict;
use serde::Serialize;

use crate::config::PipelineConfig;

/// Terminal state of a run, with its process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// `detect`: an extra significant mode was found.
    SignalClaim,
    /// `select-vars`: some variables show remarkable relevance.
    SelectionFound,
    /// `synth`: files written.
    Written,
    /// Variable selection found no remarkable relevance.
    NoRelevanceSignal,
    /// No grid bandwidth gives more modes than the background.
    NoCandidateBandwidth,
    /// Candidate modes exist but are not all significant.
    NoSignalEvidence,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::SignalClaim | Outcome::SelectionFound | Outcome::Written => 0,
            Outcome::NoRelevanceSignal => 10,
            Outcome::NoCandidateBandwidth => 11,
            Outcome::NoSignalEvidence => 12,
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Outcome::SignalClaim => "signal claim: extra significant mode found",
            Outcome::SelectionFound => "relevant variables selected",
            Outcome::Written => "files written",
            Outcome::NoRelevanceSignal => "no relevance signal",
            Outcome::NoCandidateBandwidth => "no candidate signal bandwidth",
            Outcome::NoSignalEvidence => "no signal evidence",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ToolInfo {
    pub name: &'static str,
    pub version: &'static str,
    pub library_version: &'static str,
}

impl ToolInfo {
    pub fn current() -> Self {
        Self {
            name: "modalsig",
            version: env!("CARGO_PKG_VERSION"),
            library_version: modalsig::VERSION,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Seeds {
    pub pipeline: u64,
    pub split: u64,
    pub variable_selection: u64,
    pub mode_test: u64,
}

impl Seeds {
    pub fn derive(seed: u64) -> Self {
        use modalsig::seed::{stage_seed, Stage};
        Self {
            pipeline: seed,
            split: stage_seed(seed, Stage::Split),
            variable_selection: stage_seed(seed, Stage::VariableSelection),
            mode_test: stage_seed(seed, Stage::ModeTest),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DataSummary {
    pub columns: Vec<String>,
    pub n_background: usize,
    pub n_experimental: usize,
    /// Rows of the experimental sample used for estimation.
    pub n_training: usize,
    pub n_test: usize,
    /// `split` (held out from the experimental file) or `file`.
    pub test_source: &'static str,
    pub truth_available: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariableSelectionReport {
    /// `selected`, `no_relevance_signal`, `fixed` or `skipped`.
    pub status: &'static str,
    pub reason: Option<String>,
    pub variables: Vec<String>,
    pub counts: Option<Vec<u64>>,
    pub rejections: Option<usize>,
    pub counter_file: Option<String>,
    pub selection_file: Option<String>,
    pub note: Option<&'static str>,
}

pub const HEURISTIC_NOTE: &str =
    "relevance counts are heuristic: the repeated tests are not corrected for multiplicity";

#[derive(Debug, Clone, Serialize)]
pub struct BandwidthReport {
    pub h_b: f64,
    /// `config` or `plug_in`.
    pub h_b_source: &'static str,
    pub background_modes: usize,
    pub index: modalsig::agreement::AgreementIndex,
    pub grid: Vec<f64>,
    pub selected_h: Option<f64>,
    pub selected_modes: Option<usize>,
    pub selected_index: Option<f64>,
    pub plateau: Option<Plateau>,
    pub sweep_file: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeReport {
    pub index: usize,
    pub location: Vec<f64>,
    pub location_original: Vec<f64>,
    /// Training-sample density at the mode (standardized units).
    pub density: f64,
    pub candidate: bool,
    pub test: ModeVerdict,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeTestReport {
    /// Echoed verbatim from the configuration.
    pub alpha: f64,
    pub replicates: usize,
    pub h: f64,
    /// `config` or `selected`.
    pub h_source: &'static str,
    pub modes: Vec<ModeReport>,
    pub candidates: Vec<usize>,
    pub significant: Vec<usize>,
    pub claim: bool,
    pub modes_file: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterReport {
    pub label: usize,
    pub mode: usize,
    pub size: usize,
    pub density: f64,
    pub location: Vec<f64>,
    pub location_original: Vec<f64>,
    pub candidate: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct PartitionReport {
    pub labels_file: String,
    pub unassigned: usize,
    pub clusters: Vec<ClusterReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    /// Rows: truth classes (0 = background, 1 = signal); columns: cluster
    /// labels (0 = unassigned).
    pub contingency: ContingencyTable,
    pub fowlkes_mallows: Option<f64>,
    pub adjusted_rand: f64,
    /// Share of truth-signal rows falling in candidate-mode clusters.
    pub true_positive_rate: Option<f64>,
    pub note: &'static str,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub tool: ToolInfo,
    pub command: &'static str,
    pub status: Outcome,
    pub status_message: &'static str,
    pub exit_code: i32,
    pub seeds: Seeds,
    pub config: PipelineConfig,
    pub data: Option<DataSummary>,
    pub variable_selection: Option<VariableSelectionReport>,
    pub bandwidth: Option<BandwidthReport>,
    pub mode_test: Option<ModeTestReport>,
    pub partition: Option<PartitionReport>,
    pub evaluation: Option<EvaluationReport>,
    pub outputs: Vec<String>,
    /// Seconds since the Unix epoch; omitted with `--canonical-output`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_unix: Option<u64>,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| modalsig::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

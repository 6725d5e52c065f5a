//! Pipeline configuration file (TOML).
//!
//! Every section and key is optional except the input paths needed by the
//! chosen subcommand; unknown keys are rejected. Relative paths are resolved
//! against the directory containing the configuration file.

use std::fmt;
use std::path::{Path, PathBuf};

use modalsig::agreement::AgreementIndex;
use modalsig::dataset::MixtureSpec;
use modalsig::modal::MeanShiftConfig;
use modalsig::varselect::VarSelectConfig;
use serde::{Deserialize, Serialize};

/// Invalid or unreadable configuration; maps to its own exit status.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub varselect: VarSelectSection,
    #[serde(default)]
    pub bandwidth: BandwidthConfig,
    #[serde(default)]
    pub meanshift: MeanShiftSection,
    #[serde(default)]
    pub modetest: ModeTestConfig,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub background: Option<PathBuf>,
    pub experimental: Option<PathBuf>,
    /// Held-out sample for the mode test; when absent the experimental file
    /// is split and `test_fraction` of its rows are held out.
    pub test: Option<PathBuf>,
    pub test_fraction: f64,
    /// Truth column (evaluation only). Rows are never used for estimation
    /// through it.
    pub label_column: Option<String>,
    /// Explicit background / signal values of the truth column; otherwise
    /// common encodings (0/1, b/s, ...) are recognized.
    pub label_values: Option<[String; 2]>,
    /// Fixed variable list; skips variable selection.
    pub variables: Option<Vec<String>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            background: None,
            experimental: None,
            test: None,
            test_fraction: 0.5,
            label_column: None,
            label_values: None,
            variables: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarSelectSection {
    /// Run variable selection in `detect` (when `d > k` and no fixed list).
    pub enabled: bool,
    pub iterations: usize,
    pub k: usize,
    /// p-value below which the drawn variables are credited.
    pub threshold: f64,
    pub n_perm: usize,
    /// Per-group row cap for each permutation test.
    pub max_sample: Option<usize>,
}

impl Default for VarSelectSection {
    fn default() -> Self {
        let p = VarSelectConfig::default();
        Self {
            enabled: true,
            iterations: p.iterations,
            k: p.k,
            threshold: p.threshold,
            n_perm: p.n_perm,
            max_sample: p.max_sample,
        }
    }
}

impl VarSelectSection {
    pub fn params(&self) -> VarSelectConfig {
        VarSelectConfig {
            iterations: self.iterations,
            k: self.k,
            threshold: self.threshold,
            n_perm: self.n_perm,
            max_sample: self.max_sample,
        }
    }
}

/// Mean-shift settings with the pipeline defaults: the exact library
/// defaults plus pruning of modes that attract less than 1% of the sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanShiftSection {
    pub tol_step: f64,
    pub max_iter: usize,
    pub merge: f64,
    pub capture: f64,
    pub newton: bool,
    pub newton_max_step: f64,
    pub min_support: f64,
}

impl Default for MeanShiftSection {
    fn default() -> Self {
        let m = MeanShiftConfig::default();
        Self {
            tol_step: m.tol_step,
            max_iter: m.max_iter,
            merge: m.merge,
            capture: m.capture,
            newton: m.newton,
            newton_max_step: m.newton_max_step,
            min_support: 0.01,
        }
    }
}

impl MeanShiftSection {
    pub fn params(&self) -> MeanShiftConfig {
        MeanShiftConfig {
            tol_step: self.tol_step,
            max_iter: self.max_iter,
            merge: self.merge,
            capture: self.capture,
            newton: self.newton,
            newton_max_step: self.newton_max_step,
            min_support: self.min_support,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BandwidthConfig {
    /// Background bandwidth; plug-in when absent.
    pub h_b: Option<f64>,
    /// Explicit grid values; overrides the relative grid below.
    pub grid: Option<Vec<f64>>,
    /// Relative grid: `grid_points` log-spaced values over
    /// `[grid_lo, grid_hi]` times the normal-scale bandwidth of the
    /// experimental training sample.
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_points: usize,
    pub index: AgreementIndex,
    /// Plateau tolerance reported with the sweep.
    pub plateau_tol: f64,
}

impl Default for BandwidthConfig {
    fn default() -> Self {
        Self {
            h_b: None,
            grid: None,
            grid_lo: 0.2,
            grid_hi: 3.0,
            grid_points: 30,
            index: AgreementIndex::FowlkesMallows,
            plateau_tol: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModeTestConfig {
    pub alpha: f64,
    pub replicates: usize,
    /// Test-sample bandwidth; the selected bandwidth when absent.
    pub h: Option<f64>,
}

impl Default for ModeTestConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            replicates: 1000,
            h: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub background_n: usize,
    pub experimental_n: usize,
    pub mixture: MixtureSpec,
    #[serde(default = "default_background_file")]
    pub background_file: String,
    #[serde(default = "default_experimental_file")]
    pub experimental_file: String,
    #[serde(default = "default_label")]
    pub label_column: String,
}

fn default_background_file() -> String {
    "background.csv".into()
}

fn default_experimental_file() -> String {
    "experimental.csv".into()
}

fn default_label() -> String {
    "label".into()
}

fn bad(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

impl PipelineConfig {
    /// Parses TOML text; `base` resolves relative paths.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.data.background);
        fix(&mut self.data.experimental);
        fix(&mut self.data.test);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.data;
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) {
            return Err(bad(format!(
                "data.test_fraction {} not in (0, 1)",
                d.test_fraction
            )));
        }
        if matches!(&d.variables, Some(v) if v.is_empty()) {
            return Err(bad("data.variables is empty"));
        }
        if let Some(v) = &d.variables {
            let unique: std::collections::BTreeSet<_> = v.iter().collect();
            if unique.len() != v.len() {
                return Err(bad("data.variables lists a column twice"));
            }
        }
        let v = &self.varselect;
        if v.iterations == 0 || v.k == 0 {
            return Err(bad("varselect.iterations and varselect.k must be >= 1"));
        }
        if !(v.threshold > 0.0 && v.threshold <= 1.0) {
            return Err(bad(format!(
                "varselect.threshold {} not in (0, 1]",
                v.threshold
            )));
        }
        if v.n_perm < modalsig::varselect::MIN_PERMUTATIONS {
            return Err(bad(format!(
                "varselect.n_perm must be >= {}",
                modalsig::varselect::MIN_PERMUTATIONS
            )));
        }
        let b = &self.bandwidth;
        if matches!(b.h_b, Some(h) if !(h > 0.0 && h.is_finite())) {
            return Err(bad("bandwidth.h_b must be positive"));
        }
        match &b.grid {
            Some(g) => {
                modalsig::bwselect::BandwidthGrid::new(g.clone())
                    .map_err(|e| bad(format!("bandwidth.grid: {e}")))?;
            }
            None => {
                if !(b.grid_lo > 0.0 && b.grid_hi > b.grid_lo && b.grid_points >= 2) {
                    return Err(bad(
                        "bandwidth grid needs 0 < grid_lo < grid_hi and grid_points >= 2",
                    ));
                }
            }
        }
        if !(b.plateau_tol >= 0.0) {
            return Err(bad("bandwidth.plateau_tol must be >= 0"));
        }
        self.meanshift
            .params()
            .validate()
            .map_err(|e| bad(format!("meanshift: {e}")))?;
        let m = &self.modetest;
        if !(m.alpha > 0.0 && m.alpha < 1.0) {
            return Err(bad(format!("modetest.alpha {} not in (0, 1)", m.alpha)));
        }
        if m.replicates < modalsig::modetest::MIN_REPLICATES {
            return Err(bad(format!(
                "modetest.replicates must be >= {}",
                modalsig::modetest::MIN_REPLICATES
            )));
        }
        if matches!(m.h, Some(h) if !(h > 0.0 && h.is_finite())) {
            return Err(bad("modetest.h must be positive"));
        }
        if let Some(s) = &self.synth {
            if s.background_n == 0 || s.experimental_n == 0 {
                return Err(bad("synth sample sizes must be positive"));
            }
            s.mixture
                .validate()
                .map_err(|e| bad(format!("synth.mixture: {e}")))?;
        }
        Ok(())
    }

    pub fn require_inputs(&self) -> Result<(&Path, &Path), ConfigError> {
        let b = self
            .data
            .background
            .as_deref()
            .ok_or_else(|| bad("data.background is required"))?;
        let e = self
            .data
            .experimental
            .as_deref()
            .ok_or_else(|| bad("data.experimental is required"))?;
        Ok((b, e))
    }
}

//! Subcommand drivers: `select-vars`, `detect` and `synth`.

use std::path::{Path, PathBuf};

use anyhow::Context;
use modalsig::agreement::{adjusted_rand, contingency, fowlkes_mallows};
use modalsig::bwselect::{final_partition, sweep, BandwidthGrid};
use modalsig::dataset::{
    fit_standardizer, load_csv, project, sample_mixture, split_indices, write_csv, Class, Dataset,
    LabelColumn, Standardizer,
};
use modalsig::kde::plugin_bandwidth;
use modalsig::modal::UNASSIGNED;
use modalsig::modetest::{gate, test_modes};
use modalsig::seed::{stage_seed, Stage};
use modalsig::varselect::{select_variables, Selection};
use serde::Serialize;

use crate::config::{ConfigError, PipelineConfig};
use crate::report::*;

pub const COUNTER_FILE: &str = "counter.csv";
pub const SELECTION_FILE: &str = "selected_variables.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const MODES_FILE: &str = "modes.json";
pub const LABELS_FILE: &str = "labels.csv";
pub const REPORT_FILE: &str = "report.json";

/// Command-line overrides applied on top of the configuration file.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    /// Omit run-dependent fields (timestamps, output directory) so identical
    /// inputs give byte-identical reports.
    pub canonical: bool,
}

/// A finished run: its outcome and the report written to the output
/// directory.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub outcome: Outcome,
    pub report: RunReport,
    pub out_dir: PathBuf,
}

struct RunContext {
    cfg: PipelineConfig,
    seed: u64,
    out: PathBuf,
    canonical: bool,
    outputs: Vec<String>,
}

impl RunContext {
    fn new(mut cfg: PipelineConfig, opts: &RunOptions) -> anyhow::Result<Self> {
        if let Some(s) = opts.seed {
            cfg.seed = s;
        }
        let out = opts
            .out_dir
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .ok_or_else(|| ConfigError("no output directory: set out_dir or pass --out".into()))?;
        std::fs::create_dir_all(&out).map_err(|e| modalsig::Error::Io {
            path: out.clone(),
            source: e,
        })?;
        cfg.out_dir = (!opts.canonical).then(|| out.clone());
        Ok(Self {
            seed: cfg.seed,
            cfg,
            out,
            canonical: opts.canonical,
            outputs: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
        self.out.join(name)
    }

    fn report(&self, command: &'static str, outcome: Outcome) -> RunReport {
        RunReport {
            tool: ToolInfo::current(),
            command,
            status: outcome,
            status_message: outcome.describe(),
            exit_code: outcome.exit_code(),
            seeds: Seeds::derive(self.seed),
            config: self.cfg.clone(),
            data: None,
            variable_selection: None,
            bandwidth: None,
            mode_test: None,
            partition: None,
            evaluation: None,
            outputs: Vec::new(),
            generated_unix: None,
        }
    }

    fn finish(mut self, mut report: RunReport) -> anyhow::Result<RunSummary> {
        let path = self.path(REPORT_FILE);
        report.outputs = self.outputs.clone();
        if !self.canonical {
            report.generated_unix = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .ok()
                .map(|d| d.as_secs());
        }
        write_json(&report, &path)?;
        log::info!("{}: {}", report.command, report.status_message);
        Ok(RunSummary {
            outcome: report.status,
            report,
            out_dir: self.out,
        })
    }
}

fn label_column(cfg: &PipelineConfig) -> Option<LabelColumn> {
    cfg.data.label_column.as_ref().map(|name| {
        let l = LabelColumn::new(name.clone());
        match &cfg.data.label_values {
            Some([b, s]) => l.with_values(b.clone(), s.clone()),
            None => l,
        }
    })
}

/// Loads a file; a configured truth column that the file lacks is dropped
/// with a warning.
fn load(path: &Path, label: Option<&LabelColumn>) -> anyhow::Result<Dataset> {
    match load_csv(path, label) {
        Err(modalsig::Error::MissingLabelColumn(name)) => {
            log::warn!(
                "truth column '{name}' not found in {}; evaluation omitted for it",
                path.display()
            );
            Ok(load_csv(path, None)?)
        }
        other => Ok(other.with_context(|| format!("loading {}", path.display()))?),
    }
}

fn same_columns(a: &Dataset, b: &Dataset, what: &str) -> anyhow::Result<()> {
    if a.columns() != b.columns() {
        return Err(modalsig::Error::InvalidData(format!(
            "{what} columns {:?} differ from background columns {:?}",
            b.columns(),
            a.columns()
        ))
        .into());
    }
    Ok(())
}

fn original_units(st: &Standardizer, x: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(st.center.iter().zip(&st.scale))
        .map(|(v, (c, s))| v * s + c)
        .collect()
}

#[derive(Serialize)]
struct SelectionFile<'a> {
    selected: Vec<&'a str>,
    indices: Vec<usize>,
    status: &'static str,
    note: &'static str,
}

fn write_selection(
    ctx: &mut RunContext,
    data: &Dataset,
    sel: &Selection,
) -> anyhow::Result<VariableSelectionReport> {
    let counter = ctx.path(COUNTER_FILE);
    sel.counter.write_csv(data.columns(), &counter)?;
    let status = if sel.selected.is_empty() {
        "no_relevance_signal"
    } else {
        "selected"
    };
    let file = SelectionFile {
        selected: sel
            .selected
            .iter()
            .map(|&j| data.columns()[j].as_str())
            .collect(),
        indices: sel.selected.clone(),
        status,
        note: HEURISTIC_NOTE,
    };
    let path = ctx.path(SELECTION_FILE);
    write_json(&file, &path)?;
    Ok(VariableSelectionReport {
        status,
        reason: None,
        variables: sel
            .selected
            .iter()
            .map(|&j| data.columns()[j].clone())
            .collect(),
        counts: Some(sel.counter.counts.clone()),
        rejections: Some(sel.counter.rejections),
        counter_file: Some(COUNTER_FILE.into()),
        selection_file: Some(SELECTION_FILE.into()),
        note: Some(HEURISTIC_NOTE),
    })
}

/// Relevance counting on the full variable set.
pub fn cmd_select_vars(cfg: PipelineConfig, opts: &RunOptions) -> anyhow::Result<RunSummary> {
    let mut ctx = RunContext::new(cfg, opts)?;
    let (bg_path, exp_path) = ctx.cfg.require_inputs()?;
    let (bg_path, exp_path) = (bg_path.to_path_buf(), exp_path.to_path_buf());
    let label = label_column(&ctx.cfg);
    let xb = load(&bg_path, label.as_ref())?;
    let xbs = load(&exp_path, label.as_ref())?;
    same_columns(&xb, &xbs, "experimental")?;
    let st = fit_standardizer(&xb)?;
    let (xb, xbs) = (st.apply(&xb)?, st.apply(&xbs)?);
    let params = ctx.cfg.varselect.params();
    params
        .validate(xb.d())
        .map_err(|e| ConfigError(format!("varselect: {e}")))?;
    let sel = select_variables(
        &xb,
        &xbs,
        &params,
        stage_seed(ctx.seed, Stage::VariableSelection),
    )?;
    let vs = write_selection(&mut ctx, &xb, &sel)?;
    let outcome = if sel.selected.is_empty() {
        Outcome::NoRelevanceSignal
    } else {
        Outcome::SelectionFound
    };
    let mut report = ctx.report("select-vars", outcome);
    report.data = Some(DataSummary {
        columns: xb.columns().to_vec(),
        n_background: xb.n(),
        n_experimental: xbs.n(),
        n_training: xbs.n(),
        n_test: 0,
        test_source: "none",
        truth_available: false,
    });
    report.variable_selection = Some(vs);
    ctx.finish(report)
}

/// The full pipeline: variable choice, bandwidth sweep, mode test, final
/// partition and (with truth labels) evaluation.
pub fn cmd_detect(cfg: PipelineConfig, opts: &RunOptions) -> anyhow::Result<RunSummary> {
    let mut ctx = RunContext::new(cfg, opts)?;
    let (bg_path, exp_path) = ctx.cfg.require_inputs()?;
    let (bg_path, exp_path) = (bg_path.to_path_buf(), exp_path.to_path_buf());
    let label = label_column(&ctx.cfg);
    let xb_raw = load(&bg_path, label.as_ref())?;
    let exp_raw = load(&exp_path, label.as_ref())?;
    same_columns(&xb_raw, &exp_raw, "experimental")?;

    // training / test experimental samples; `train_rows` are file positions
    let (train_raw, test_raw, train_rows, test_source) = match &ctx.cfg.data.test {
        Some(p) => {
            let t = load(p, label.as_ref())?;
            same_columns(&xb_raw, &t, "test")?;
            let rows: Vec<usize> = (0..exp_raw.n()).collect();
            (exp_raw.clone(), t, rows, "file")
        }
        None => {
            let frac = 1.0 - ctx.cfg.data.test_fraction;
            let (a, b) = split_indices(exp_raw.n(), frac, stage_seed(ctx.seed, Stage::Split))?;
            (
                exp_raw.select_rows(&a)?,
                exp_raw.select_rows(&b)?,
                a,
                "split",
            )
        }
    };

    // a fixed variable list is applied before standardizing, so columns
    // outside it are never inspected
    let fixed = match &ctx.cfg.data.variables {
        Some(names) => {
            let mut idx = Vec::with_capacity(names.len());
            for name in names {
                let j = xb_raw
                    .columns()
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| {
                        ConfigError(format!("data.variables: unknown column '{name}'"))
                    })?;
                idx.push(j);
            }
            Some(idx)
        }
        None => None,
    };
    let (xb_raw, train_raw, test_raw) = match &fixed {
        Some(idx) => (
            project(&xb_raw, idx)?,
            project(&train_raw, idx)?,
            project(&test_raw, idx)?,
        ),
        None => (xb_raw, train_raw, test_raw),
    };

    let st_full = fit_standardizer(&xb_raw)?;
    let xb_full = st_full.apply(&xb_raw)?;
    let train_full = st_full.apply(&train_raw)?;
    let test_full = st_full.apply(&test_raw)?;

    let mut report_data = DataSummary {
        columns: xb_raw.columns().to_vec(),
        n_background: xb_raw.n(),
        n_experimental: exp_raw.n(),
        n_training: train_raw.n(),
        n_test: test_raw.n(),
        test_source,
        truth_available: train_raw.truth().is_some(),
    };

    // variable choice
    let d = xb_full.d();
    let vs_cfg = ctx.cfg.varselect.clone();
    let (columns, vs_report) = if fixed.is_some() {
        let rep = VariableSelectionReport {
            status: "fixed",
            reason: Some("variables fixed in the configuration".into()),
            variables: xb_full.columns().to_vec(),
            counts: None,
            rejections: None,
            counter_file: None,
            selection_file: None,
            note: None,
        };
        ((0..d).collect(), rep)
    } else if vs_cfg.enabled && d > vs_cfg.k {
        let params = vs_cfg.params();
        params
            .validate(d)
            .map_err(|e| ConfigError(format!("varselect: {e}")))?;
        let sel = select_variables(
            &xb_full,
            &train_full,
            &params,
            stage_seed(ctx.seed, Stage::VariableSelection),
        )?;
        let rep = write_selection(&mut ctx, &xb_full, &sel)?;
        if sel.selected.is_empty() {
            let mut report = ctx.report("detect", Outcome::NoRelevanceSignal);
            report.data = Some(report_data);
            report.variable_selection = Some(rep);
            return ctx.finish(report);
        }
        (sel.selected, rep)
    } else {
        let reason = if vs_cfg.enabled {
            format!("d = {d} does not exceed the subset size k = {}", vs_cfg.k)
        } else {
            "disabled in the configuration".to_string()
        };
        log::info!("variable selection skipped: {reason}; using all variables");
        let rep = VariableSelectionReport {
            status: "skipped",
            reason: Some(reason),
            variables: xb_full.columns().to_vec(),
            counts: None,
            rejections: None,
            counter_file: None,
            selection_file: None,
            note: None,
        };
        ((0..d).collect(), rep)
    };
    report_data.columns = columns
        .iter()
        .map(|&j| xb_full.columns()[j].clone())
        .collect();

    let st = st_full.project(&columns);
    let xb = project(&xb_full, &columns)?;
    let xbs = project(&train_full, &columns)?;
    let xt = project(&test_full, &columns)?;

    // bandwidth sweep
    let ms = ctx.cfg.meanshift.params();
    let bw = ctx.cfg.bandwidth.clone();
    let (h_b, h_b_source) = match bw.h_b {
        Some(h) => (h, "config"),
        None => (plugin_bandwidth(&xb)?, "plug_in"),
    };
    let grid = match &bw.grid {
        Some(g) => BandwidthGrid::new(g.clone())?,
        None => BandwidthGrid::relative_to_normal_scale(
            xbs.n(),
            xbs.d(),
            bw.grid_lo,
            bw.grid_hi,
            bw.grid_points,
        )?,
    };
    let result = sweep(&xb, &xbs, h_b, &grid, bw.index, &ms)?;
    let sweep_path = ctx.path(SWEEP_FILE);
    result.write_csv(&sweep_path)?;
    let m_b = result.background_modes();
    let selected = result.selected_record().cloned();
    let bw_report = BandwidthReport {
        h_b,
        h_b_source,
        background_modes: m_b,
        index: bw.index,
        grid: grid.values().to_vec(),
        selected_h: selected.as_ref().map(|r| r.h),
        selected_modes: selected.as_ref().map(|r| r.modes),
        selected_index: selected.as_ref().and_then(|r| r.index),
        plateau: result.plateau(m_b + 1, bw.plateau_tol),
        sweep_file: SWEEP_FILE.into(),
    };
    let mut report = ctx.report("detect", Outcome::NoCandidateBandwidth);
    report.data = Some(report_data);
    report.variable_selection = Some(vs_report);
    report.bandwidth = Some(bw_report);
    let Some(selected) = selected else {
        return ctx.finish(report);
    };

    // mode test on the held-out sample
    let modes = selected
        .mode_set
        .clone()
        .expect("sweep records carry their modes");
    let mt_cfg = ctx.cfg.modetest.clone();
    let (h_test, h_source) = match mt_cfg.h {
        Some(h) => (h, "config"),
        None => (selected.h, "selected"),
    };
    let tested = test_modes(
        &modes,
        &xt,
        h_test,
        mt_cfg.alpha,
        mt_cfg.replicates,
        stage_seed(ctx.seed, Stage::ModeTest),
    )?;
    let verdict = gate(&tested, &result.background.partition.modes);
    let mode_reports: Vec<ModeReport> = tested
        .modes
        .iter()
        .enumerate()
        .map(|(k, v)| ModeReport {
            index: k,
            location: v.location.clone(),
            location_original: original_units(&st, &v.location),
            density: modes.densities[k],
            candidate: verdict.candidates.contains(&k),
            test: v.clone(),
        })
        .collect();
    let modes_path = ctx.path(MODES_FILE);
    write_json(&mode_reports, &modes_path)?;
    report.mode_test = Some(ModeTestReport {
        alpha: tested.alpha,
        replicates: tested.replicates,
        h: tested.h,
        h_source,
        modes: mode_reports,
        candidates: verdict.candidates.clone(),
        significant: verdict.significant.clone(),
        claim: verdict.claim,
        modes_file: MODES_FILE.into(),
    });
    if !verdict.claim {
        report.status = Outcome::NoSignalEvidence;
        report.status_message = Outcome::NoSignalEvidence.describe();
        report.exit_code = Outcome::NoSignalEvidence.exit_code();
        return ctx.finish(report);
    }

    // final partition of the experimental training sample
    let partition = final_partition(&result, &xbs, &ms)?;
    if partition.modes != modes {
        return Err(anyhow::anyhow!(
            "final partition modes differ from the selected sweep modes"
        ));
    }
    let labels_path = ctx.path(LABELS_FILE);
    partition.write_csv_with_rows(&labels_path, &train_rows)?;
    let sizes = partition.cluster_sizes();
    report.partition = Some(PartitionReport {
        labels_file: LABELS_FILE.into(),
        unassigned: partition.unassigned(),
        clusters: (0..partition.modes.len())
            .map(|k| ClusterReport {
                label: k + 1,
                mode: k,
                size: sizes[k],
                density: partition.modes.densities[k],
                location: partition.modes.locations[k].clone(),
                location_original: original_units(&st, &partition.modes.locations[k]),
                candidate: verdict.candidates.contains(&k),
            })
            .collect(),
    });

    // evaluation against truth, never used above
    if let Some(truth) = xbs.truth() {
        let classes: Vec<usize> = truth
            .iter()
            .map(|c| usize::from(*c == Class::Signal))
            .collect();
        let table = contingency(&classes, &partition.labels)?;
        let fm = match fowlkes_mallows(&table) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("evaluation: {e}");
                None
            }
        };
        let signal_rows = classes.iter().filter(|&&c| c == 1).count();
        let caught = classes
            .iter()
            .zip(&partition.labels)
            .filter(|(c, l)| {
                **c == 1 && **l != UNASSIGNED && verdict.candidates.contains(&(**l - 1))
            })
            .count();
        report.evaluation = Some(EvaluationReport {
            adjusted_rand: adjusted_rand(&table),
            contingency: table,
            fowlkes_mallows: fm,
            true_positive_rate: (signal_rows > 0).then(|| caught as f64 / signal_rows as f64),
            note: "truth labels are used for this evaluation only",
        });
    }
    report.status = Outcome::SignalClaim;
    report.status_message = Outcome::SignalClaim.describe();
    report.exit_code = Outcome::SignalClaim.exit_code();
    ctx.finish(report)
}

/// Writes a background sample (signal fraction forced to 0) and an
/// experimental sample, both with a 0/1 truth column.
pub fn cmd_synth(cfg: PipelineConfig, opts: &RunOptions) -> anyhow::Result<RunSummary> {
    let mut ctx = RunContext::new(cfg, opts)?;
    let synth = ctx
        .cfg
        .synth
        .clone()
        .ok_or_else(|| ConfigError("the [synth] section is required".into()))?;
    let bg = sample_mixture(
        &synth.mixture.with_signal_fraction(0.0),
        synth.background_n,
        stage_seed(ctx.seed, Stage::SynthBackground),
    )?;
    let exp = sample_mixture(
        &synth.mixture,
        synth.experimental_n,
        stage_seed(ctx.seed, Stage::SynthExperimental),
    )?;
    let bg_path = ctx.path(&synth.background_file);
    write_csv(&bg, &bg_path, Some(&synth.label_column))?;
    let exp_path = ctx.path(&synth.experimental_file);
    write_csv(&exp, &exp_path, Some(&synth.label_column))?;
    log::info!(
        "wrote {} background and {} experimental rows ({} signal)",
        bg.n(),
        exp.n(),
        exp.signal_count().unwrap_or(0)
    );
    let mut report = ctx.report("synth", Outcome::Written);
    report.data = Some(DataSummary {
        columns: exp.columns().to_vec(),
        n_background: bg.n(),
        n_experimental: exp.n(),
        n_training: 0,
        n_test: 0,
        test_source: "none",
        truth_available: true,
    });
    ctx.finish(report)
}

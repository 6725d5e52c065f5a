//! Numeric samples: ingest, standardization, projection, splitting and
//! synthetic Gaussian mixtures.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Evaluation-only tag of a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Background,
    Signal,
}

/// An `n x d` matrix of finite reals with column names and optional truth.
///
/// Values are stored row-major. A `Dataset` is immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    values: Vec<f64>,
    n: usize,
    d: usize,
    columns: Vec<String>,
    truth: Option<Vec<Class>>,
}

impl Dataset {
    pub fn new(
        values: Vec<f64>,
        n: usize,
        columns: Vec<String>,
        truth: Option<Vec<Class>>,
    ) -> Result<Self> {
        let d = columns.len();
        if n == 0 || d == 0 {
            return Err(Error::InvalidData(format!(
                "need n >= 1 and d >= 1, got n = {n}, d = {d}"
            )));
        }
        if values.len() != n * d {
            return Err(Error::InvalidData(format!(
                "{} values do not fill a {n} x {d} matrix",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::BadCell {
                row: pos / d,
                column: columns[pos % d].clone(),
                value: values[pos].to_string(),
            });
        }
        if let Some(t) = &truth {
            if t.len() != n {
                return Err(Error::InvalidData(format!(
                    "truth has {} entries for {n} rows",
                    t.len()
                )));
            }
        }
        Ok(Self {
            values,
            n,
            d,
            columns,
            truth,
        })
    }

    /// Builds a dataset from rows, naming columns `x1..xd`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::RaggedRow {
                row: bad,
                expected: d,
                found: rows[bad].len(),
            });
        }
        let columns = (1..=d).map(|j| format!("x{j}")).collect();
        Self::new(rows.concat(), rows.len(), columns, None)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn truth(&self) -> Option<&[Class]> {
        self.truth.as_deref()
    }

    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.d)
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().skip(j).step_by(self.d).copied()
    }

    pub fn with_truth(mut self, truth: Option<Vec<Class>>) -> Result<Self> {
        if let Some(t) = &truth {
            if t.len() != self.n {
                return Err(Error::InvalidData(format!(
                    "truth has {} entries for {} rows",
                    t.len(),
                    self.n
                )));
            }
        }
        self.truth = truth;
        Ok(self)
    }

    /// Rows at `indices`, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidData("row selection is empty".into()));
        }
        let mut values = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            if i >= self.n {
                return Err(Error::InvalidData(format!(
                    "row {i} out of range (n = {})",
                    self.n
                )));
            }
            values.extend_from_slice(self.row(i));
        }
        let truth = self
            .truth
            .as_ref()
            .map(|t| indices.iter().map(|&i| t[i]).collect());
        Self::new(values, indices.len(), self.columns.clone(), truth)
    }

    /// Stacks `self` on top of `other`. Truth is kept only if both carry it.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if self.d != other.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                found: other.d,
            });
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        let truth = match (&self.truth, &other.truth) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Self::new(values, self.n + other.n, self.columns.clone(), truth)
    }

    pub fn signal_count(&self) -> Option<usize> {
        self.truth
            .as_ref()
            .map(|t| t.iter().filter(|&&c| c == Class::Signal).count())
    }
}

/// How a label column maps onto [`Class`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelColumn {
    pub name: String,
    /// Explicit `(background, signal)` values. When absent, the common pairs
    /// `0/1`, `b/s`, `bkg/sig` and `background/signal` are recognised.
    pub values: Option<(String, String)>,
}

impl LabelColumn {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            values: None,
        }
    }

    pub fn with_values(mut self, background: impl Into<String>, signal: impl Into<String>) -> Self {
        self.values = Some((background.into(), signal.into()));
        self
    }

    fn classify(&self, raw: &str) -> Option<Class> {
        let v = raw.trim();
        match &self.values {
            Some((b, s)) if v == b => Some(Class::Background),
            Some((_, s)) if v == s => Some(Class::Signal),
            Some(_) => None,
            None => match v.to_ascii_lowercase().as_str() {
                "0" | "b" | "bkg" | "background" => Some(Class::Background),
                "1" | "s" | "sig" | "signal" => Some(Class::Signal),
                _ => None,
            },
        }
    }
}

/// Reads a header-first CSV of numeric columns.
///
/// Returns [`Error::MissingLabelColumn`] when `label` names a column that the
/// header does not contain; callers that treat truth as optional can catch it.
pub fn load_csv(path: impl AsRef<Path>, label: Option<&LabelColumn>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let label_pos = match label {
        Some(l) => Some(
            header
                .iter()
                .position(|h| *h == l.name)
                .ok_or_else(|| Error::MissingLabelColumn(l.name.clone()))?,
        ),
        None => None,
    };
    let columns: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != label_pos)
        .map(|(_, h)| h.clone())
        .collect();

    let mut values = Vec::new();
    let mut truth = Vec::new();
    let mut n = 0;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != header.len() {
            return Err(Error::RaggedRow {
                row,
                expected: header.len(),
                found: record.len(),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            if Some(j) == label_pos {
                let l = label.expect("label position implies a label column");
                let class = l.classify(cell).ok_or_else(|| Error::BadCell {
                    row,
                    column: header[j].clone(),
                    value: cell.to_owned(),
                })?;
                truth.push(class);
                continue;
            }
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::BadCell {
                    row,
                    column: header[j].clone(),
                    value: cell.to_owned(),
                })?;
            values.push(v);
        }
        n += 1;
    }
    let truth = label_pos.map(|_| truth);
    Dataset::new(values, n, columns, truth)
}

/// Writes `data` as CSV. Values use the shortest representation that parses
/// back to the same `f64`. Truth, when present and `truth_column` is given, is
/// written as `0` (background) / `1` (signal).
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>, truth_column: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let truth = truth_column.zip(data.truth());
    let mut header = data.columns().join(",");
    if let Some((name, _)) = truth {
        header.push(',');
        header.push_str(name);
    }
    let io = |e| Error::io(path, e);
    writeln!(out, "{header}").map_err(io)?;
    let mut line = String::new();
    for (i, row) in data.rows().enumerate() {
        line.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&v.to_string());
        }
        if let Some((_, t)) = truth {
            line.push_str(match t[i] {
                Class::Background => ",0",
                Class::Signal => ",1",
            });
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Per-column location and spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Column means and sample standard deviations (denominator `n - 1`).
pub fn fit_standardizer(data: &Dataset) -> Result<Standardizer> {
    if data.n() < 2 {
        return Err(Error::InvalidData(
            "standardizer needs at least two rows".into(),
        ));
    }
    let n = data.n() as f64;
    let mut center = Vec::with_capacity(data.d());
    let mut scale = Vec::with_capacity(data.d());
    for j in 0..data.d() {
        let mean = data.column(j).sum::<f64>() / n;
        let ss: f64 = data.column(j).map(|v| (v - mean) * (v - mean)).sum();
        let sd = (ss / (n - 1.0)).sqrt();
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(Error::ConstantColumn(data.columns()[j].clone()));
        }
        center.push(mean);
        scale.push(sd);
    }
    Ok(Standardizer { center, scale })
}

impl Standardizer {
    fn check(&self, data: &Dataset) -> Result<()> {
        if data.d() != self.center.len() {
            return Err(Error::DimensionMismatch {
                expected: self.center.len(),
                found: data.d(),
            });
        }
        Ok(())
    }

    fn map(&self, data: &Dataset, f: impl Fn(f64, f64, f64) -> f64) -> Result<Dataset> {
        self.check(data)?;
        let d = data.d();
        let values = data
            .values()
            .iter()
            .enumerate()
            .map(|(k, &v)| f(v, self.center[k % d], self.scale[k % d]))
            .collect();
        Dataset::new(
            values,
            data.n(),
            data.columns().to_vec(),
            data.truth().map(<[Class]>::to_vec),
        )
    }

    /// `(x - center) / scale` per column.
    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        self.map(data, |v, c, s| (v - c) / s)
    }

    pub fn invert(&self, data: &Dataset) -> Result<Dataset> {
        self.map(data, |v, c, s| v * s + c)
    }

    pub fn project(&self, columns: &[usize]) -> Standardizer {
        Standardizer {
            center: columns.iter().map(|&j| self.center[j]).collect(),
            scale: columns.iter().map(|&j| self.scale[j]).collect(),
        }
    }
}

pub fn apply_standardizer(s: &Standardizer, data: &Dataset) -> Result<Dataset> {
    s.apply(data)
}

/// Restricts `data` to `columns`, in the order given.
pub fn project(data: &Dataset, columns: &[usize]) -> Result<Dataset> {
    if columns.is_empty() {
        return Err(Error::InvalidData("projection onto no columns".into()));
    }
    let mut seen = BTreeSet::new();
    for &j in columns {
        if j >= data.d() {
            return Err(Error::BadIndex {
                index: j,
                d: data.d(),
            });
        }
        if !seen.insert(j) {
            return Err(Error::DuplicateIndex(j));
        }
    }
    let mut values = Vec::with_capacity(data.n() * columns.len());
    for row in data.rows() {
        values.extend(columns.iter().map(|&j| row[j]));
    }
    let names = columns.iter().map(|&j| data.columns()[j].clone()).collect();
    Dataset::new(values, data.n(), names, data.truth().map(<[Class]>::to_vec))
}

/// Random disjoint row split. The first part holds `round(fraction * n)` rows;
/// both parts keep the original row order.
pub fn split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (a, b) = split_indices(data.n(), fraction, seed)?;
    Ok((data.select_rows(&a)?, data.select_rows(&b)?))
}

/// Row indices of the two parts produced by [`split`], each ascending.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "split fraction {fraction} not in (0, 1)"
        )));
    }
    let first = (fraction * n as f64).round() as usize;
    if first == 0 || first >= n {
        return Err(Error::InvalidParameter(format!(
            "split fraction {fraction} of n = {n} leaves an empty part"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed));
    let mut b = order.split_off(first);
    order.sort_unstable();
    b.sort_unstable();
    Ok((order, b))
}

/// One Gaussian component of a [`MixtureSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

/// A Gaussian mixture split into background and signal components.
///
/// A row is a signal draw with probability `signal_fraction`; within the
/// chosen group, the component is picked with probability proportional to its
/// weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub components: Vec<MixtureComponent>,
    pub signal_fraction: f64,
    /// Indices into `components` of the signal components.
    #[serde(default)]
    pub signal: Vec<usize>,
}

struct PreparedComponent {
    weight: f64,
    mean: DVector<f64>,
    chol: DMatrix<f64>,
}

impl MixtureSpec {
    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, |c| c.mean.len())
    }

    /// Same components with a different signal fraction.
    pub fn with_signal_fraction(&self, signal_fraction: f64) -> Self {
        Self {
            signal_fraction,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prepare().map(|_| ())
    }

    fn prepare(&self) -> Result<(Vec<PreparedComponent>, Vec<bool>)> {
        let bad = |m: String| Err(Error::InvalidMixture(m));
        if self.components.is_empty() {
            return bad("no components".into());
        }
        let d = self.dim();
        if d == 0 {
            return bad("zero-dimensional mean".into());
        }
        if !(0.0..1.0).contains(&self.signal_fraction) {
            return bad(format!(
                "signal_fraction {} not in [0, 1)",
                self.signal_fraction
            ));
        }
        let mut is_signal = vec![false; self.components.len()];
        for &s in &self.signal {
            if s >= self.components.len() {
                return bad(format!("signal index {s} out of range"));
            }
            is_signal[s] = true;
        }
        if self.signal_fraction > 0.0 && !is_signal.iter().any(|&s| s) {
            return bad("positive signal_fraction but no signal component".into());
        }
        if is_signal.iter().all(|&s| s) {
            return bad("no background component".into());
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad(format!("weights sum to {total}, not 1"));
        }
        let mut prepared = Vec::with_capacity(self.components.len());
        for (k, c) in self.components.iter().enumerate() {
            if !(c.weight > 0.0) {
                return bad(format!("component {k} has non-positive weight"));
            }
            if c.mean.len() != d || c.mean.iter().any(|v| !v.is_finite()) {
                return bad(format!("component {k} mean is not a finite {d}-vector"));
            }
            if c.cov.len() != d || c.cov.iter().any(|r| r.len() != d) {
                return bad(format!("component {k} covariance is not {d} x {d}"));
            }
            let cov = DMatrix::from_fn(d, d, |i, j| c.cov[i][j]);
            let asym = (&cov - cov.transpose()).abs().max();
            if !(asym <= 1e-12 * cov.abs().max().max(1.0)) {
                return bad(format!("component {k} covariance is not symmetric"));
            }
            let chol = cov.cholesky().ok_or_else(|| {
                Error::InvalidMixture(format!("component {k} covariance is not positive definite"))
            })?;
            prepared.push(PreparedComponent {
                weight: c.weight,
                mean: DVector::from_column_slice(&c.mean),
                chol: chol.l(),
            });
        }
        Ok((prepared, is_signal))
    }
}

fn pick(rng: &mut seed::Rng, group: &[(usize, f64)]) -> usize {
    let total: f64 = group.iter().map(|g| g.1).sum();
    let mut u = rng.gen::<f64>() * total;
    for &(k, w) in group {
        if u < w {
            return k;
        }
        u -= w;
    }
    group.last().expect("non-empty group").0
}

/// `n` i.i.d. draws from `spec`; truth marks rows drawn from signal components.
pub fn sample_mixture(spec: &MixtureSpec, n: usize, seed: u64) -> Result<Dataset> {
    let (components, is_signal) = spec.prepare()?;
    if n == 0 {
        return Err(Error::InvalidParameter(
            "sample size must be positive".into(),
        ));
    }
    let d = spec.dim();
    let group = |signal: bool| -> Vec<(usize, f64)> {
        components
            .iter()
            .enumerate()
            .filter(|(k, _)| is_signal[*k] == signal)
            .map(|(k, c)| (k, c.weight))
            .collect()
    };
    let background = group(false);
    let signal = group(true);
    let mut rng = seed::rng(seed);
    let mut values = Vec::with_capacity(n * d);
    let mut truth = Vec::with_capacity(n);
    let mut z = DVector::zeros(d);
    for _ in 0..n {
        let is_sig = spec.signal_fraction > 0.0 && rng.gen::<f64>() < spec.signal_fraction;
        let k = if is_sig {
            pick(&mut rng, &signal)
        } else {
            pick(&mut rng, &background)
        };
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let c = &components[k];
        let x = &c.mean + &c.chol * &z;
        values.extend(x.iter());
        truth.push(if is_sig {
            Class::Signal
        } else {
            Class::Background
        });
    }
    let columns = (1..=d).map(|j| format!("x{j}")).collect();
    Dataset::new(values, n, columns, Some(truth))
}

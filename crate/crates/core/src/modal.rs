//! Mean-shift mode seeking and modal partitions.
//!
//! Each point climbs the Gaussian kernel estimate with the fixed-point update
//! `x <- sum_i w_i x_i / sum_i w_i`, `w_i = exp(-|x - x_i|^2 / (2 h^2))`, until
//! the step is shorter than `tol_step * h`. Endpoints closer than
//! `merge * h` are merged by single linkage; the highest-density endpoint of a
//! group is the mode. A point is labeled with the mode nearest to its endpoint.
//!
//! `find_modes` and `assign` also stop a trajectory once it enters the
//! `capture * h` ball around an already converged endpoint and reuse that
//! endpoint. Starts are processed in fixed batches and a batch only sees the
//! endpoints of earlier batches, so results do not depend on thread count.
//! Where the estimate is locally concave they may also take Newton steps,
//! each one kept only if it increases the kernel sum.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kde::{upper_index, DensityModel, WeightSums};

/// Label given to points whose ascent could not start.
pub const UNASSIGNED: usize = 0;

const BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanShiftConfig {
    /// Stop when the step is shorter than `tol_step * h`.
    pub tol_step: f64,
    pub max_iter: usize,
    /// Single-linkage merge radius, relative to `h`.
    pub merge: f64,
    /// Early-stop radius around known endpoints, relative to `h`; 0 disables.
    pub capture: f64,
    /// Take safeguarded Newton steps where the estimate is locally concave.
    pub newton: bool,
    /// Longest accepted Newton step, relative to `h`.
    pub newton_max_step: f64,
    /// Modes attracting fewer than this fraction of the successful starts in
    /// [`find_modes`] are dropped and their starts given to the kept mode
    /// nearest to them; 0 keeps every mode.
    pub min_support: f64,
}

impl Default for MeanShiftConfig {
    fn default() -> Self {
        Self {
            tol_step: 1e-6,
            max_iter: 10_000,
            merge: 0.1,
            capture: 0.01,
            newton: true,
            newton_max_step: 1.0,
            min_support: 0.0,
        }
    }
}

impl MeanShiftConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.tol_step > 0.0
            && self.max_iter > 0
            && self.merge > 0.0
            && self.capture >= 0.0
            && self.capture < self.merge
            && self.newton_max_step > 0.0
            && (0.0..1.0).contains(&self.min_support);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "mean-shift settings out of range: {self:?}"
            )))
        }
    }
}

/// Distinct modes sorted by descending density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSet {
    pub locations: Vec<Vec<f64>>,
    pub densities: Vec<f64>,
}

impl ModeSet {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    /// Index of the mode nearest to `x`; ties go to the lower index.
    pub fn nearest(&self, x: &[f64]) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, m) in self.locations.iter().enumerate() {
            let d2 = sq_dist(x, m);
            if best.is_none_or(|(_, b)| d2 < b) {
                best = Some((k, d2));
            }
        }
        best.map(|(k, _)| k)
    }
}

/// Cluster labels in `1..=M` (or [`UNASSIGNED`]) and the modes behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub labels: Vec<usize>,
    pub modes: ModeSet,
}

impl Partition {
    pub fn unassigned(&self) -> usize {
        self.labels.iter().filter(|&&l| l == UNASSIGNED).count()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.modes.len()];
        for &l in &self.labels {
            if l != UNASSIGNED {
                sizes[l - 1] += 1;
            }
        }
        sizes
    }

    /// CSV with header `row,cluster,mode`: zero-based row index, cluster label
    /// (`0` = unassigned) and zero-based mode index (`NA` when unassigned).
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let rows: Vec<usize> = (0..self.labels.len()).collect();
        self.write_csv_with_rows(path, &rows)
    }

    /// As [`Partition::write_csv`] with caller-supplied row identifiers, e.g.
    /// positions in an original file before splitting.
    pub fn write_csv_with_rows(&self, path: impl AsRef<Path>, rows: &[usize]) -> Result<()> {
        if rows.len() != self.labels.len() {
            return Err(Error::DimensionMismatch {
                expected: self.labels.len(),
                found: rows.len(),
            });
        }
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut out = std::io::BufWriter::new(File::create(path).map_err(io)?);
        writeln!(out, "row,cluster,mode").map_err(io)?;
        for (&i, &l) in rows.iter().zip(&self.labels) {
            if l == UNASSIGNED {
                writeln!(out, "{i},0,NA").map_err(io)?;
            } else {
                writeln!(out, "{i},{l},{}", l - 1).map_err(io)?;
            }
        }
        out.flush().map_err(io)
    }
}

/// Result of [`find_modes`]: the modes plus, for every start, the mode its
/// endpoint was merged into.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeSearch {
    pub modes: ModeSet,
    /// Merge-group mode index per start; `None` when the ascent failed.
    pub groups: Vec<Option<usize>>,
    pub failures: usize,
}

impl ModeSearch {
    /// The grouping as a partition with labels `1..=M`.
    pub fn partition(&self) -> Partition {
        Partition {
            labels: self
                .groups
                .iter()
                .map(|g| g.map_or(UNASSIGNED, |k| k + 1))
                .collect(),
            modes: self.modes.clone(),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

/// Runs mean-shift from `x0` until the step is below `tol_step * h` or
/// `max_iter` updates have been made.
///
/// This is the plain fixed-point iteration; the `capture` and `newton`
/// settings only apply inside [`find_modes`] and [`assign`].
pub fn ascend(model: &DensityModel, x0: &[f64], cfg: &MeanShiftConfig) -> Result<Vec<f64>> {
    let plain = MeanShiftConfig {
        newton: false,
        ..*cfg
    };
    climb(model, x0, &plain, &[]).map(|(x, _)| x)
}

/// Newton step `(S h^2 I - C)^{-1} S h^2 (m - x)` for the kernel sum `S`,
/// scatter `C` and mean-shift target `m`, if the estimate is concave at `x`.
fn newton_step(sums: &WeightSums, h: f64, ms_step: &[f64]) -> Option<Vec<f64>> {
    let d = ms_step.len();
    let scatter = sums.scatter.as_ref()?;
    let sh2 = sums.total * h * h;
    let a = DMatrix::from_fn(d, d, |i, j| {
        let (p, q) = if i <= j { (i, j) } else { (j, i) };
        let diag = if i == j { sh2 } else { 0.0 };
        diag - scatter[upper_index(d, p, q)]
    });
    let chol = a.cholesky()?;
    let rhs = DVector::from_iterator(d, ms_step.iter().map(|v| v * sh2));
    let step = chol.solve(&rhs);
    step.iter()
        .all(|v| v.is_finite())
        .then(|| step.iter().copied().collect())
}

/// Ascent with early capture by `known` endpoints. Returns the endpoint and
/// the index of the capturing endpoint, if any.
///
/// A Newton step is only kept if the kernel sum increased; otherwise the walk
/// falls back to the mean-shift target of the previous point, so the kernel
/// sum never decreases along the path.
fn climb(
    model: &DensityModel,
    x0: &[f64],
    cfg: &MeanShiftConfig,
    known: &[Vec<f64>],
) -> Result<(Vec<f64>, Option<usize>)> {
    if x0.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: x0.len(),
        });
    }
    let h = model.bandwidth();
    let tol2 = (cfg.tol_step * h).powi(2);
    let cap2 = (cfg.capture * h).powi(2);
    let max_newton2 = (cfg.newton_max_step * h).powi(2);
    let mut x = x0.to_vec();
    // (kernel sum, mean-shift target) before the last Newton step
    let mut pending: Option<(f64, Vec<f64>)> = None;
    for _ in 0..cfg.max_iter {
        if cap2 > 0.0 {
            if let Some(k) = known.iter().position(|e| sq_dist(&x, e) < cap2) {
                return Ok((known[k].clone(), Some(k)));
            }
        }
        let sums = model.weight_sums(&x, cfg.newton);
        if !(sums.total > 0.0) {
            match pending.take() {
                Some((_, fallback)) => {
                    x = fallback;
                    continue;
                }
                None => return Err(Error::UnreachablePoint),
            }
        }
        if let Some((prev_total, fallback)) = pending.take() {
            if sums.total < prev_total {
                x = fallback;
                continue;
            }
        }
        let target: Vec<f64> = sums.weighted.iter().map(|v| v / sums.total).collect();
        let ms_step: Vec<f64> = target.iter().zip(&x).map(|(t, p)| t - p).collect();
        let ms2: f64 = ms_step.iter().map(|v| v * v).sum();
        if ms2 < tol2 {
            return Ok((target, None));
        }
        if cfg.newton {
            if let Some(step) = newton_step(&sums, h, &ms_step) {
                let n2: f64 = step.iter().map(|v| v * v).sum();
                if n2 <= max_newton2 {
                    let next: Vec<f64> = x.iter().zip(&step).map(|(p, s)| p + s).collect();
                    if n2 < tol2 {
                        return Ok((next, None));
                    }
                    pending = Some((sums.total, target));
                    x = next;
                    continue;
                }
            }
        }
        x = target;
    }
    log::debug!("mean-shift hit max_iter = {} at {x:?}", cfg.max_iter);
    Ok((x, None))
}

/// Climbs from every start in deterministic batches, sharing converged
/// endpoints for capture.
fn climb_all(
    model: &DensityModel,
    starts: &[Vec<f64>],
    cfg: &MeanShiftConfig,
    seeds: Vec<Vec<f64>>,
) -> Vec<Result<Vec<f64>>> {
    let mut known = seeds;
    let mut out = Vec::with_capacity(starts.len());
    let cap2 = (cfg.capture * model.bandwidth()).powi(2);
    for batch in starts.chunks(BATCH) {
        let results: Vec<Result<(Vec<f64>, Option<usize>)>> = batch
            .par_iter()
            .map(|x0| climb(model, x0, cfg, &known))
            .collect();
        for r in results {
            match r {
                Ok((x, captured)) => {
                    if cap2 > 0.0
                        && captured.is_none()
                        && !known.iter().any(|e| sq_dist(&x, e) < cap2)
                    {
                        known.push(x.clone());
                    }
                    out.push(Ok(x));
                }
                Err(e) => out.push(Err(e)),
            }
        }
    }
    out
}

/// Ascends from every start, merges endpoints within `merge * h` by single
/// linkage and returns the modes sorted by descending density.
pub fn find_modes(
    model: &DensityModel,
    starts: &[Vec<f64>],
    cfg: &MeanShiftConfig,
) -> Result<ModeSearch> {
    cfg.validate()?;
    if starts.is_empty() {
        return Err(Error::InvalidParameter("no starting points".into()));
    }
    let endpoints = climb_all(model, starts, cfg, Vec::new());
    let failures = endpoints.iter().filter(|e| e.is_err()).count();
    if failures == starts.len() {
        return Err(Error::UnreachablePoint);
    }
    if failures > 0 {
        log::warn!("{failures} of {} ascents failed", starts.len());
    }

    // Distinct endpoints first: capture makes many of them bitwise equal.
    let mut distinct: Vec<Vec<f64>> = Vec::new();
    let mut distinct_of: Vec<Option<usize>> = Vec::with_capacity(starts.len());
    for e in &endpoints {
        match e {
            Ok(x) => {
                let k = match distinct.iter().position(|y| y == x) {
                    Some(k) => k,
                    None => {
                        distinct.push(x.clone());
                        distinct.len() - 1
                    }
                };
                distinct_of.push(Some(k));
            }
            Err(_) => distinct_of.push(None),
        }
    }

    let radius2 = (cfg.merge * model.bandwidth()).powi(2);
    let group_of = single_linkage(&distinct, radius2);
    let n_groups = group_of.iter().copied().max().map_or(0, |g| g + 1);

    let densities: Vec<f64> = distinct
        .par_iter()
        .map(|x| model.density(x))
        .collect::<Result<_>>()?;
    // representative: highest-density endpoint of each group
    let mut rep: Vec<Option<usize>> = vec![None; n_groups];
    for (k, &g) in group_of.iter().enumerate() {
        if rep[g].is_none_or(|r| densities[k] > densities[r]) {
            rep[g] = Some(k);
        }
    }
    let mut order: Vec<usize> = (0..n_groups).collect();
    // descending density, ties by group discovery order
    order.sort_by(|&a, &b| {
        let da = densities[rep[a].unwrap()];
        let db = densities[rep[b].unwrap()];
        db.partial_cmp(&da).unwrap().then(a.cmp(&b))
    });
    let mut rank = vec![0; n_groups];
    for (r, &g) in order.iter().enumerate() {
        rank[g] = r;
    }
    let modes = ModeSet {
        locations: order
            .iter()
            .map(|&g| distinct[rep[g].unwrap()].clone())
            .collect(),
        densities: order.iter().map(|&g| densities[rep[g].unwrap()]).collect(),
    };
    let groups: Vec<Option<usize>> = distinct_of
        .iter()
        .map(|k| k.map(|k| rank[group_of[k]]))
        .collect();
    let threshold = cfg.min_support * (starts.len() - failures) as f64;
    Ok(prune(
        ModeSearch {
            modes,
            groups,
            failures,
        },
        threshold,
    ))
}

/// Drops modes supported by fewer than `threshold` starts, keeping at least
/// the best-supported one, and moves their starts to the nearest kept mode.
fn prune(search: ModeSearch, threshold: f64) -> ModeSearch {
    let m = search.modes.len();
    let mut support = vec![0usize; m];
    for g in search.groups.iter().flatten() {
        support[*g] += 1;
    }
    let mut keep: Vec<bool> = support.iter().map(|&s| s as f64 >= threshold).collect();
    if !keep.iter().any(|&k| k) {
        let best = (0..m).max_by(|&a, &b| support[a].cmp(&support[b]).then(b.cmp(&a)));
        keep[best.expect("at least one mode")] = true;
    }
    if keep.iter().all(|&k| k) {
        return search;
    }
    let kept = ModeSet {
        locations: (0..m)
            .filter(|&k| keep[k])
            .map(|k| search.modes.locations[k].clone())
            .collect(),
        densities: (0..m)
            .filter(|&k| keep[k])
            .map(|k| search.modes.densities[k])
            .collect(),
    };
    log::debug!("pruned {} weakly supported modes", m - kept.len());
    let target: Vec<usize> = search
        .modes
        .locations
        .iter()
        .map(|x| kept.nearest(x).expect("non-empty"))
        .collect();
    ModeSearch {
        groups: search.groups.iter().map(|g| g.map(|g| target[g])).collect(),
        modes: kept,
        failures: search.failures,
    }
}

/// Connected components of the graph linking points closer than
/// `sqrt(radius2)`, numbered in order of first appearance.
fn single_linkage(points: &[Vec<f64>], radius2: f64) -> Vec<usize> {
    const NONE: usize = usize::MAX;
    let mut group = vec![NONE; points.len()];
    let mut next = 0;
    let mut stack = Vec::new();
    for s in 0..points.len() {
        if group[s] != NONE {
            continue;
        }
        group[s] = next;
        stack.push(s);
        while let Some(i) = stack.pop() {
            for j in 0..points.len() {
                if group[j] == NONE && sq_dist(&points[i], &points[j]) < radius2 {
                    group[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    group
}

fn sample_points(model: &DensityModel) -> Vec<Vec<f64>> {
    model.data().rows().map(<[f64]>::to_vec).collect()
}

/// Modes reached from the estimation sample itself.
pub fn find_sample_modes(model: &DensityModel, cfg: &MeanShiftConfig) -> Result<ModeSearch> {
    find_modes(model, &sample_points(model), cfg)
}

/// Number of modes reached from the estimation sample.
pub fn count_modes(model: &DensityModel, cfg: &MeanShiftConfig) -> Result<usize> {
    find_sample_modes(model, cfg).map(|s| s.modes.len())
}

/// Modal partition of the estimation sample.
pub fn cluster(model: &DensityModel, cfg: &MeanShiftConfig) -> Result<Partition> {
    find_sample_modes(model, cfg).map(|s| s.partition())
}

/// Labels arbitrary points by ascending on `model` and taking the mode nearest
/// to each endpoint. Points whose ascent fails are [`UNASSIGNED`].
pub fn assign(
    modes: &ModeSet,
    model: &DensityModel,
    points: &[Vec<f64>],
    cfg: &MeanShiftConfig,
) -> Result<Partition> {
    cfg.validate()?;
    if modes.is_empty() {
        return Err(Error::InvalidParameter("empty mode set".into()));
    }
    if let Some(p) = points.iter().find(|p| p.len() != model.dim()) {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: p.len(),
        });
    }
    let endpoints = climb_all(model, points, cfg, modes.locations.clone());
    let mut unassigned = 0;
    let labels = endpoints
        .iter()
        .map(|e| match e {
            Ok(x) => modes.nearest(x).expect("non-empty modes") + 1,
            Err(_) => {
                unassigned += 1;
                UNASSIGNED
            }
        })
        .collect();
    if unassigned > 0 {
        log::warn!("{unassigned} of {} points unassigned", points.len());
    }
    Ok(Partition {
        labels,
        modes: modes.clone(),
    })
}

/// Convenience over [`assign`] for a whole dataset.
pub fn assign_dataset(
    modes: &ModeSet,
    model: &DensityModel,
    data: &crate::dataset::Dataset,
    cfg: &MeanShiftConfig,
) -> Result<Partition> {
    let points: Vec<Vec<f64>> = data.rows().map(<[f64]>::to_vec).collect();
    assign(modes, model, &points, cfg)
}

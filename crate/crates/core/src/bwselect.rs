//! Undersmoothing bandwidth search for the experimental density.
//!
//! The background estimate `f_b` (bandwidth `h_b`) has `M_b` modes and
//! partitions the background sample into `P_b(X_b)`. For each candidate `h`
//! the experimental estimate `f_bs(.; h)` has `M_bs(h)` modes and induces a
//! second partition `P_bs(X_b)` of the same background points. The selected
//! bandwidth maximizes the agreement `I(P_b(X_b), P_bs(X_b))` over
//! `H = {h : M_bs(h) > M_b}`; among equal maxima the largest `h` wins.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agreement::{contingency, AgreementIndex};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kde::{normal_scale, DensityModel};
use crate::modal::{assign_dataset, find_sample_modes, MeanShiftConfig, ModeSet, Partition};

/// Strictly increasing positive bandwidths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandwidthGrid {
    values: Vec<f64>,
}

impl BandwidthGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidParameter(
                "bandwidth grid needs at least two values".into(),
            ));
        }
        if values.iter().any(|h| !(*h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidParameter(
                "bandwidth grid values must be positive and finite".into(),
            ));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter(
                "bandwidth grid must be strictly increasing".into(),
            ));
        }
        Ok(Self { values })
    }

    /// `points` values evenly spaced in `log h` over `[lo, hi]`.
    pub fn log_spaced(lo: f64, hi: f64, points: usize) -> Result<Self> {
        if !(lo > 0.0 && hi > lo && hi.is_finite()) || points < 2 {
            return Err(Error::InvalidParameter(format!(
                "log grid needs 0 < lo < hi and >= 2 points (lo = {lo}, hi = {hi}, points = {points})"
            )));
        }
        let (a, b) = (lo.ln(), hi.ln());
        let step = (b - a) / (points - 1) as f64;
        let mut values: Vec<f64> = (0..points).map(|i| (a + step * i as f64).exp()).collect();
        values[0] = lo;
        values[points - 1] = hi;
        Self::new(values)
    }

    /// `points` log-spaced values from `lo` to `hi` times the normal-scale
    /// bandwidth of an `n x d` sample.
    pub fn relative_to_normal_scale(
        n: usize,
        d: usize,
        lo: f64,
        hi: f64,
        points: usize,
    ) -> Result<Self> {
        let h = normal_scale(n, d);
        Self::log_spaced(lo * h, hi * h, points)
    }

    /// Default grid: 30 log-spaced values over `[0.2, 3]` times the
    /// normal-scale bandwidth of the experimental sample.
    pub fn default_for(xbs: &Dataset) -> Result<Self> {
        Self::relative_to_normal_scale(xbs.n(), xbs.d(), 0.2, 3.0, 30)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Background estimate and its modal partition of the background sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundReference {
    pub h: f64,
    pub partition: Partition,
}

impl BackgroundReference {
    pub fn mode_count(&self) -> usize {
        self.partition.modes.len()
    }
}

/// Fits `f_b` with bandwidth `hb`, finds its modes and clusters `xb`.
pub fn background_reference(
    xb: &Dataset,
    hb: f64,
    cfg: &MeanShiftConfig,
) -> Result<BackgroundReference> {
    let model = DensityModel::new(xb, hb)?;
    let partition = find_sample_modes(&model, cfg)?.partition();
    Ok(BackgroundReference { h: hb, partition })
}

/// One grid point of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub h: f64,
    /// `M_bs(h)`.
    pub modes: usize,
    /// Agreement between `P_b(X_b)` and `P_bs(X_b)`; `None` when undefined.
    pub index: Option<f64>,
    /// `M_bs(h) > M_b`.
    pub in_h: bool,
    /// Background points left unassigned by the experimental estimate.
    pub unassigned: usize,
    #[serde(skip)]
    pub mode_set: Option<ModeSet>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthSearchResult {
    pub records: Vec<SweepRecord>,
    pub index: AgreementIndex,
    pub background: BackgroundReference,
    /// Position in `records` of the selected bandwidth.
    pub selected: Option<usize>,
}

/// Stretch of consecutive grid points sharing a mode count with nearly
/// constant agreement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    /// First record of the stretch.
    pub start: usize,
    pub len: usize,
    pub max_index: f64,
}

impl BandwidthSearchResult {
    pub fn background_modes(&self) -> usize {
        self.background.mode_count()
    }

    pub fn selected_record(&self) -> Option<&SweepRecord> {
        self.selected.map(|i| &self.records[i])
    }

    pub fn selected_h(&self) -> Option<f64> {
        self.selected_record().map(|r| r.h)
    }

    /// The longest stretch of consecutive records with `modes == target`
    /// whose agreement values all lie within `tol` of the stretch maximum.
    /// Earlier stretches win ties.
    pub fn plateau(&self, target: usize, tol: f64) -> Option<Plateau> {
        let recs = &self.records;
        let mut best: Option<Plateau> = None;
        for start in 0..recs.len() {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for (end, r) in recs.iter().enumerate().skip(start) {
                let v = match (r.modes == target, r.index) {
                    (true, Some(v)) => v,
                    _ => break,
                };
                lo = lo.min(v);
                hi = hi.max(v);
                if hi - lo > tol {
                    break;
                }
                let len = end - start + 1;
                if best.is_none_or(|b| len > b.len) {
                    best = Some(Plateau {
                        start,
                        len,
                        max_index: hi,
                    });
                }
            }
        }
        best
    }

    /// Sweep table with header `h,modes,index,in_h`; an undefined index is
    /// written as `NA`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["h", "modes", "index", "in_h"])?;
        for r in &self.records {
            w.write_record([
                r.h.to_string(),
                r.modes.to_string(),
                r.index.map_or_else(|| "NA".to_string(), |v| v.to_string()),
                r.in_h.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn evaluate(
    xb: &Dataset,
    xbs: &Dataset,
    reference: &BackgroundReference,
    h: f64,
    index: AgreementIndex,
    cfg: &MeanShiftConfig,
) -> Result<SweepRecord> {
    let model = DensityModel::new(xbs, h)?;
    let modes = find_sample_modes(&model, cfg)?.modes;
    let on_background = assign_dataset(&modes, &model, xb, cfg)?;
    let table = contingency(&reference.partition.labels, &on_background.labels)?;
    let value = match index.compute(&table) {
        Ok(v) => Some(v),
        Err(Error::DegeneratePartition(why)) => {
            log::warn!("agreement undefined at h = {h}: {why}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(SweepRecord {
        h,
        modes: modes.len(),
        index: value,
        in_h: modes.len() > reference.mode_count(),
        unassigned: on_background.unassigned(),
        mode_set: Some(modes),
    })
}

/// Index of the record maximizing the agreement over `in_h` records; ties go
/// to the larger bandwidth (later record).
pub fn select(records: &[SweepRecord]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in records.iter().enumerate() {
        if let (true, Some(v)) = (r.in_h, r.index) {
            if best.is_none_or(|(_, b)| v >= b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Evaluates every grid bandwidth against the background reference fitted
/// with `hb`. Both samples must already be standardized with the background
/// standardizer.
///
/// An empty `H` is not an error: the result has `selected == None`.
pub fn sweep(
    xb: &Dataset,
    xbs: &Dataset,
    hb: f64,
    grid: &BandwidthGrid,
    index: AgreementIndex,
    cfg: &MeanShiftConfig,
) -> Result<BandwidthSearchResult> {
    if xb.d() != xbs.d() {
        return Err(Error::DimensionMismatch {
            expected: xb.d(),
            found: xbs.d(),
        });
    }
    if xb.n() < 2 {
        return Err(Error::InvalidData(
            "background sample needs at least two rows".into(),
        ));
    }
    let background = background_reference(xb, hb, cfg)?;
    let records = grid
        .values()
        .par_iter()
        .map(|&h| evaluate(xb, xbs, &background, h, index, cfg))
        .collect::<Result<Vec<_>>>()?;
    let selected = select(&records);
    if selected.is_none() {
        log::warn!(
            "no grid bandwidth gives more than {} modes: no extra mode on grid",
            background.mode_count()
        );
    }
    Ok(BandwidthSearchResult {
        records,
        index,
        background,
        selected,
    })
}

/// Modal partition of the experimental sample at the selected bandwidth.
pub fn final_partition(
    result: &BandwidthSearchResult,
    xbs: &Dataset,
    cfg: &MeanShiftConfig,
) -> Result<Partition> {
    let h = result.selected_h().ok_or(Error::NoCandidateBandwidth)?;
    let model = DensityModel::new(xbs, h)?;
    Ok(find_sample_modes(&model, cfg)?.partition())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{MixtureComponent, MixtureSpec};

    fn record(h: f64, modes: usize, index: Option<f64>, in_h: bool) -> SweepRecord {
        SweepRecord {
            h,
            modes,
            index,
            in_h,
            unassigned: 0,
            mode_set: None,
        }
    }

    fn line(values: &[f64]) -> Dataset {
        Dataset::from_rows(&values.iter().map(|&v| vec![v]).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(BandwidthGrid::new(vec![0.1]).is_err());
        assert!(BandwidthGrid::new(vec![0.1, 0.1]).is_err());
        assert!(BandwidthGrid::new(vec![0.0, 0.1]).is_err());
        let g = BandwidthGrid::log_spaced(0.05, 1.5, 30).unwrap();
        assert_eq!(g.values().len(), 30);
        assert_eq!(g.values()[0], 0.05);
        assert_eq!(g.values()[29], 1.5);
        let ratio = g.values()[1] / g.values()[0];
        assert!((g.values()[20] / g.values()[19] - ratio).abs() < 1e-12);
        let d = BandwidthGrid::relative_to_normal_scale(2000, 2, 0.2, 3.0, 30).unwrap();
        assert!((d.values()[0] - 0.2 * normal_scale(2000, 2)).abs() < 1e-15);
    }

    #[test]
    fn selection_rule() {
        let recs = vec![
            record(0.1, 4, Some(0.7), true),
            record(0.2, 2, Some(0.9), true),
            record(0.3, 2, Some(0.9), true),
            record(0.4, 1, Some(1.0), false),
            record(0.5, 3, None, true),
        ];
        assert_eq!(select(&recs), Some(2));
        assert_eq!(select(&recs[3..4]), None);
    }

    #[test]
    fn plateau_detection() {
        let vals = [0.5, 0.8, 0.81, 0.795, 0.805, 0.6, 0.83, 0.83];
        let records = vals
            .iter()
            .enumerate()
            .map(|(i, &v)| record(i as f64 + 1.0, if i < 7 { 2 } else { 1 }, Some(v), i < 7))
            .collect();
        let res = BandwidthSearchResult {
            records,
            index: AgreementIndex::FowlkesMallows,
            background: BackgroundReference {
                h: 1.0,
                partition: Partition {
                    labels: vec![1, 1],
                    modes: ModeSet {
                        locations: vec![vec![0.0]],
                        densities: vec![1.0],
                    },
                },
            },
            selected: None,
        };
        let p = res.plateau(2, 0.02).unwrap();
        assert_eq!((p.start, p.len), (1, 4));
        assert_eq!(p.max_index, 0.81);
        assert!(res.plateau(5, 0.02).is_none());
    }

    #[test]
    fn background_reference_counts() {
        let cfg = MeanShiftConfig::default();
        let single = line(&[0.3]);
        assert_eq!(
            background_reference(&single, 1.0, &cfg)
                .unwrap()
                .mode_count(),
            1
        );
        let spec = |mu: f64| MixtureSpec {
            components: vec![
                MixtureComponent {
                    weight: 0.5,
                    mean: vec![-mu],
                    cov: vec![vec![1.0]],
                },
                MixtureComponent {
                    weight: 0.5,
                    mean: vec![mu],
                    cov: vec![vec![1.0]],
                },
            ],
            signal_fraction: 0.0,
            signal: vec![],
        };
        let uni = crate::dataset::sample_mixture(&spec(0.0), 2000, 3).unwrap();
        let r = background_reference(&uni, normal_scale(2000, 1), &cfg).unwrap();
        assert_eq!(r.mode_count(), 1);
        assert_eq!(r.partition.cluster_sizes(), vec![2000]);
        let bi = crate::dataset::sample_mixture(&spec(3.0), 2000, 4).unwrap();
        assert_eq!(
            background_reference(&bi, 0.3, &cfg).unwrap().mode_count(),
            2
        );
    }

    #[test]
    fn oversmoothing_grid_has_empty_h() {
        let xb = line(&[-1.0, -0.5, 0.0, 0.4, 1.1]);
        let xbs = line(&[-1.2, -0.3, 0.1, 0.5, 0.9, 1.3]);
        let grid = BandwidthGrid::new(vec![5.0, 10.0]).unwrap();
        let cfg = MeanShiftConfig::default();
        let res = sweep(&xb, &xbs, 5.0, &grid, AgreementIndex::FowlkesMallows, &cfg).unwrap();
        assert_eq!(res.background_modes(), 1);
        assert!(res.records.iter().all(|r| r.modes == 1 && !r.in_h));
        assert!(res.selected.is_none());
        assert!(matches!(
            final_partition(&res, &xbs, &cfg),
            Err(Error::NoCandidateBandwidth)
        ));
    }

    #[test]
    fn planted_signal_1d() {
        let spec = MixtureSpec {
            components: vec![
                MixtureComponent {
                    weight: 0.5,
                    mean: vec![0.0],
                    cov: vec![vec![1.0]],
                },
                MixtureComponent {
                    weight: 0.5,
                    mean: vec![4.0],
                    cov: vec![vec![0.0625]],
                },
            ],
            signal_fraction: 0.3,
            signal: vec![1],
        };
        let xb = crate::dataset::sample_mixture(&spec.with_signal_fraction(0.0), 1000, 1).unwrap();
        let xbs = crate::dataset::sample_mixture(&spec, 1000, 2).unwrap();
        let grid = BandwidthGrid::log_spaced(0.05, 1.5, 30).unwrap();
        let cfg = MeanShiftConfig::default();
        let hb = crate::kde::plugin_bandwidth(&xb).unwrap();
        let res = sweep(&xb, &xbs, hb, &grid, AgreementIndex::FowlkesMallows, &cfg).unwrap();
        assert_eq!(res.background_modes(), 1);
        for r in &res.records {
            assert_eq!(r.in_h, r.modes > 1);
        }
        let sel = res.selected_record().unwrap();
        assert_eq!(sel.modes, 2);
        assert!(res
            .records
            .iter()
            .filter(|r| r.in_h)
            .all(|r| r.index <= sel.index));
        // beyond the collapse point the estimate is unimodal
        assert_eq!(res.records.last().unwrap().modes, 1);
        let p = res.plateau(2, 0.02).unwrap();
        assert!(p.len >= 5, "{p:?}");
        let part = final_partition(&res, &xbs, &cfg).unwrap();
        assert_eq!(part.modes.len(), 2);
        let truth = xbs.truth().unwrap();
        let minority = part
            .cluster_sizes()
            .iter()
            .enumerate()
            .min_by_key(|(_, s)| **s)
            .unwrap()
            .0
            + 1;
        let signal = truth
            .iter()
            .filter(|c| **c == crate::dataset::Class::Signal)
            .count();
        let caught = truth
            .iter()
            .zip(&part.labels)
            .filter(|(c, l)| **c == crate::dataset::Class::Signal && **l == minority)
            .count();
        assert!(caught as f64 >= 0.9 * signal as f64);
        // deterministic
        let again = sweep(&xb, &xbs, hb, &grid, AgreementIndex::FowlkesMallows, &cfg).unwrap();
        assert_eq!(again.records, res.records);
    }
}

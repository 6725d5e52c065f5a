//! Bootstrap significance of candidate modes.
//!
//! At each fixed mode location the Hessian of the kernel estimate built on a
//! held-out test sample is resampled `B` times. A mode is significant when
//! every eigenvalue's percentile interval (Bonferroni level `1 - alpha / d`)
//! lies strictly below zero, i.e. the estimate is locally strictly concave.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kde::{add_hessian_term, upper_index};
use crate::modal::ModeSet;
use crate::seed;

/// Smallest accepted number of bootstrap replicates.
pub const MIN_REPLICATES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeVerdict {
    pub location: Vec<f64>,
    /// Eigenvalues of the full test-sample Hessian, ascending.
    pub eigenvalues: Vec<f64>,
    /// `[lower, upper]` per eigenvalue, in the order of `eigenvalues`.
    pub intervals: Vec<[f64; 2]>,
    pub p_value: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTestResult {
    pub alpha: f64,
    pub replicates: usize,
    pub h: f64,
    pub modes: Vec<ModeVerdict>,
}

/// Ascending eigenvalues of a symmetric matrix given as a packed upper
/// triangle.
fn eigenvalues(packed: &[f64], d: usize, scale: f64) -> Vec<f64> {
    let m = DMatrix::from_fn(d, d, |i, j| {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        packed[upper_index(d, a, b)] * scale
    });
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Type-7 sample quantile of sorted values.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Tests every mode in `modes` on `test_data` with bandwidth `h`.
///
/// Replicate `r` resamples the test rows with the stream
/// `seed::derive(seed, r)`; all modes share the same resamples. Intervals use
/// the `alpha / (2d)` and `1 - alpha / (2d)` percentiles, widened if needed to
/// contain the point estimate. The reported `p` is
/// `min(1, d * max_j share of replicates with eigenvalue j >= 0)`.
pub fn test_modes(
    modes: &ModeSet,
    test_data: &Dataset,
    h: f64,
    alpha: f64,
    replicates: usize,
    seed: u64,
) -> Result<ModeTestResult> {
    if test_data.n() == 0 {
        return Err(Error::InvalidData("empty test sample".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "alpha {alpha} not in (0, 1)"
        )));
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "bandwidth must be positive and finite, got {h}"
        )));
    }
    if replicates < MIN_REPLICATES {
        return Err(Error::TooFewReplicates {
            got: replicates,
            min: MIN_REPLICATES,
        });
    }
    let d = test_data.d();
    if let Some(m) = modes.locations.iter().find(|m| m.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: m.len(),
        });
    }
    let n = test_data.n();
    let packed = d * (d + 1) / 2;
    let scale = (2.0 * PI).powf(-0.5 * d as f64) / (n as f64 * h.powi(d as i32 + 2));

    // terms[mode][row * packed..]: per-row Hessian contributions
    let terms: Vec<Vec<f64>> = modes
        .locations
        .par_iter()
        .map(|m| {
            let mut t = vec![0.0; n * packed];
            let mut u = vec![0.0; d];
            for (i, row) in test_data.rows().enumerate() {
                add_hessian_term(&mut t[i * packed..(i + 1) * packed], m, row, h, &mut u);
            }
            t
        })
        .collect();

    let sum_rows = |t: &[f64], rows: &mut dyn Iterator<Item = usize>| -> Vec<f64> {
        let mut acc = vec![0.0; packed];
        for i in rows {
            for (a, v) in acc.iter_mut().zip(&t[i * packed..(i + 1) * packed]) {
                *a += v;
            }
        }
        acc
    };

    // boot[r][mode] = ascending eigenvalues
    let boot: Vec<Vec<Vec<f64>>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let mut rng = seed::rng(seed::derive(seed, r as u64));
            let draws: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            terms
                .iter()
                .map(|t| eigenvalues(&sum_rows(t, &mut draws.iter().copied()), d, scale))
                .collect()
        })
        .collect();

    let tail = alpha / (2.0 * d as f64);
    let verdicts = modes
        .locations
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let point = eigenvalues(&sum_rows(&terms[k], &mut (0..n)), d, scale);
            let mut intervals = Vec::with_capacity(d);
            let mut worst = 0.0f64;
            for j in 0..d {
                let mut v: Vec<f64> = boot.iter().map(|b| b[k][j]).collect();
                v.sort_by(f64::total_cmp);
                let lower = quantile(&v, tail).min(point[j]);
                let upper = quantile(&v, 1.0 - tail).max(point[j]);
                intervals.push([lower, upper]);
                let share = v.iter().filter(|&&x| x >= 0.0).count() as f64 / replicates as f64;
                worst = worst.max(share);
            }
            ModeVerdict {
                location: m.clone(),
                eigenvalues: point,
                significant: intervals.iter().all(|ci| ci[1] < 0.0),
                intervals,
                p_value: (d as f64 * worst).min(1.0),
            }
        })
        .collect();
    Ok(ModeTestResult {
        alpha,
        replicates,
        h,
        modes: verdicts,
    })
}

/// Outcome of checking the modes beyond the background count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateSummary {
    /// Indices into the tested modes of the candidate signal modes: those not
    /// matched to a background mode.
    pub candidates: Vec<usize>,
    /// Candidates whose verdict is significant.
    pub significant: Vec<usize>,
    pub claim: bool,
}

/// Matches each background mode, in order, to the nearest still unmatched
/// tested mode; the `M_bs - M_b` leftovers are the candidates. Signal is
/// claimed when there is at least one candidate and all are significant.
pub fn gate(result: &ModeTestResult, background: &ModeSet) -> GateSummary {
    let m = result.modes.len();
    let mut matched = vec![false; m];
    for b in &background.locations {
        let nearest = (0..m).filter(|&k| !matched[k]).min_by(|&x, &y| {
            let dx = sq_dist(&result.modes[x].location, b);
            let dy = sq_dist(&result.modes[y].location, b);
            dx.total_cmp(&dy).then(x.cmp(&y))
        });
        if let Some(k) = nearest {
            matched[k] = true;
        }
    }
    let candidates: Vec<usize> = (0..m).filter(|&k| !matched[k]).collect();
    let significant: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&k| result.modes[k].significant)
        .collect();
    GateSummary {
        claim: !candidates.is_empty() && significant.len() == candidates.len(),
        candidates,
        significant,
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{sample_mixture, MixtureComponent, MixtureSpec};
    use crate::kde::{normal_scale, DensityModel};

    fn gaussian(d: usize, n: usize, seed: u64) -> Dataset {
        let spec = MixtureSpec {
            components: vec![MixtureComponent {
                weight: 1.0,
                mean: vec![0.0; d],
                cov: (0..d)
                    .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                    .collect(),
            }],
            signal_fraction: 0.0,
            signal: vec![],
        };
        sample_mixture(&spec, n, seed).unwrap()
    }

    fn modes(locs: Vec<Vec<f64>>) -> ModeSet {
        let densities = vec![1.0; locs.len()];
        ModeSet {
            locations: locs,
            densities,
        }
    }

    #[test]
    fn point_estimate_matches_model_hessian() {
        let data = gaussian(3, 200, 1);
        let loc = vec![0.2, -0.1, 0.3];
        let res = test_modes(&modes(vec![loc.clone()]), &data, 0.5, 0.05, 200, 0).unwrap();
        let hess = DensityModel::new(&data, 0.5)
            .unwrap()
            .hessian(&loc)
            .unwrap();
        let mut ev: Vec<f64> = SymmetricEigen::new(hess)
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        for (a, b) in ev.iter().zip(&res.modes[0].eigenvalues) {
            assert!((a - b).abs() < 1e-12 * a.abs().max(1e-3));
        }
        assert!(res.modes[0].eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn quantile_type7() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert!((quantile(&v, 0.1) - 1.3).abs() < 1e-15);
    }

    #[test]
    fn normal_mode_is_significant() {
        // at the density-optimal h the curvature estimate is too noisy (sd of
        // the second derivative ~0.3 against a mean of -0.36); curvature
        // needs a wider kernel
        let data = gaussian(1, 5000, 2);
        let h = 2.0 * normal_scale(5000, 1);
        let res = test_modes(&modes(vec![vec![0.0]]), &data, h, 0.001, 500, 7).unwrap();
        let v = &res.modes[0];
        assert!(v.significant, "{v:?}");
        assert!(v.intervals[0][1] < 0.0);
        assert_eq!(v.p_value, 0.0);
        assert!(v.intervals[0][0] <= v.eigenvalues[0] && v.eigenvalues[0] <= v.intervals[0][1]);
    }

    #[test]
    fn antimode_is_not_significant() {
        let spec = MixtureSpec {
            components: vec![
                MixtureComponent {
                    weight: 0.5,
                    mean: vec![-2.0, 0.0],
                    cov: vec![vec![0.5, 0.0], vec![0.0, 1.0]],
                },
                MixtureComponent {
                    weight: 0.5,
                    mean: vec![2.0, 0.0],
                    cov: vec![vec![0.5, 0.0], vec![0.0, 1.0]],
                },
            ],
            signal_fraction: 0.0,
            signal: vec![],
        };
        let data = sample_mixture(&spec, 2000, 3).unwrap();
        let res = test_modes(&modes(vec![vec![0.0, 0.0]]), &data, 0.4, 0.001, 300, 1).unwrap();
        let v = &res.modes[0];
        assert!(!v.significant);
        assert!(v.intervals[1][1] >= 0.0);
        assert!(v.p_value > 0.5);
    }

    #[test]
    fn smaller_alpha_widens_intervals() {
        let data = gaussian(2, 300, 4);
        let m = modes(vec![vec![0.1, 0.0], vec![1.0, 1.0]]);
        let wide = test_modes(&m, &data, 0.5, 0.0001, 400, 9).unwrap();
        let narrow = test_modes(&m, &data, 0.5, 0.01, 400, 9).unwrap();
        for (w, n) in wide.modes.iter().zip(&narrow.modes) {
            for (a, b) in w.intervals.iter().zip(&n.intervals) {
                assert!(a[0] <= b[0] && a[1] >= b[1]);
            }
        }
        assert_eq!(wide, test_modes(&m, &data, 0.5, 0.0001, 400, 9).unwrap());
    }

    #[test]
    fn errors() {
        let data = gaussian(1, 10, 5);
        let m = modes(vec![vec![0.0]]);
        assert!(matches!(
            test_modes(&m, &data, 0.5, 0.01, 199, 0),
            Err(Error::TooFewReplicates { got: 199, min: 200 })
        ));
        assert!(test_modes(&modes(vec![vec![0.0, 0.0]]), &data, 0.5, 0.01, 200, 0).is_err());
        assert!(test_modes(&m, &data, 0.0, 0.01, 200, 0).is_err());
    }

    #[test]
    fn positive_curvature_location_rarely_significant() {
        // radial curvature of the standard normal is positive beyond r = 1
        let mut hits = 0;
        for s in 0..200 {
            let data = gaussian(2, 300, 100 + s);
            let res = test_modes(&modes(vec![vec![1.8, 0.0]]), &data, 0.5, 0.05, 200, s).unwrap();
            if res.modes[0].significant {
                hits += 1;
            }
        }
        // 0.05 + 3 * sqrt(0.05 * 0.95 / 200) = 0.096
        assert!(hits as f64 / 200.0 <= 0.096, "{hits}");
    }

    #[test]
    fn gate_rule() {
        let verdict = |x: f64, s: bool| ModeVerdict {
            location: vec![x],
            eigenvalues: vec![-1.0],
            intervals: vec![[-2.0, if s { -0.5 } else { 0.5 }]],
            p_value: if s { 0.0 } else { 0.5 },
            significant: s,
        };
        let res = |v: Vec<(f64, bool)>| ModeTestResult {
            alpha: 0.001,
            replicates: 200,
            h: 1.0,
            modes: v.into_iter().map(|(x, s)| verdict(x, s)).collect(),
        };
        let origin = modes(vec![vec![0.0]]);
        // the denser signal mode comes first; the background match is the second
        let g = gate(&res(vec![(4.0, true), (0.1, false)]), &origin);
        assert!(g.claim);
        assert_eq!(g.candidates, vec![0]);
        assert!(!gate(&res(vec![(0.0, true), (4.0, false)]), &origin).claim);
        let g = gate(
            &res(vec![(0.0, false), (3.0, true), (-3.0, false)]),
            &origin,
        );
        assert_eq!(g.candidates, vec![1, 2]);
        assert_eq!(g.significant, vec![1]);
        assert!(!g.claim);
        assert!(!gate(&res(vec![(0.2, true)]), &origin).claim);
        let two = modes(vec![vec![-1.0], vec![1.0]]);
        let g = gate(&res(vec![(1.1, true), (-0.9, true), (5.0, true)]), &two);
        assert_eq!(g.candidates, vec![2]);
        assert!(g.claim);
    }
}

//! Variable selection by repeated two-sample tests on random variable subsets.
//!
//! The two-sample statistic is the integrated squared difference between two
//! Gaussian kernel estimates sharing one bandwidth,
//!
//! ```text
//! T = int (f_b - f_bs)^2
//!   = S_bb / n_b^2 - 2 S_bs / (n_b n_bs) + S_ss / n_bs^2,
//! ```
//!
//! where `S_..` sums `phi_{h sqrt 2}(u)` over all ordered pairs of the two
//! groups (convolution of two Gaussians of scale `h`). Its null distribution
//! is obtained by permuting group memberships of the pooled sample.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kde::normal_scale;
use crate::seed;

/// Smallest accepted number of permutations.
pub const MIN_PERMUTATIONS: usize = 99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IseTestOutcome {
    pub statistic: f64,
    pub p_value: f64,
    pub permutations: usize,
}

fn check_pair(xb: &Dataset, xbs: &Dataset, h: f64) -> Result<()> {
    if xb.d() != xbs.d() {
        return Err(Error::DimensionMismatch {
            expected: xb.d(),
            found: xbs.d(),
        });
    }
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "bandwidth must be positive and finite, got {h}"
        )));
    }
    if xb.n() == 0 || xbs.n() == 0 {
        return Err(Error::InvalidData(
            "two-sample statistic on an empty sample".into(),
        ));
    }
    Ok(())
}

/// `phi_{h sqrt 2}` in `k` dimensions as a function of the squared distance.
#[derive(Debug, Clone, Copy)]
struct ConvolvedKernel {
    norm: f64,
    inv_4h2: f64,
}

impl ConvolvedKernel {
    fn new(h: f64, k: usize) -> Self {
        Self {
            norm: (4.0 * PI * h * h).powf(-0.5 * k as f64),
            inv_4h2: 1.0 / (4.0 * h * h),
        }
    }

    fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        let r: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
        self.norm * (-r * self.inv_4h2).exp()
    }
}

fn cross_sum(kern: ConvolvedKernel, a: &Dataset, b: &Dataset) -> f64 {
    a.rows()
        .map(|x| b.rows().map(|y| kern.eval(x, y)).sum::<f64>())
        .sum()
}

/// Closed-form `int (f_b - f_bs)^2` for Gaussian estimates with common `h`.
pub fn ise_statistic(xb: &Dataset, xbs: &Dataset, h: f64) -> Result<f64> {
    check_pair(xb, xbs, h)?;
    let kern = ConvolvedKernel::new(h, xb.d());
    let nb = xb.n() as f64;
    let ns = xbs.n() as f64;
    let t = cross_sum(kern, xb, xb) / (nb * nb) - 2.0 * cross_sum(kern, xb, xbs) / (nb * ns)
        + cross_sum(kern, xbs, xbs) / (ns * ns);
    Ok(t.max(0.0))
}

/// Pooled kernel matrix with cached row sums; evaluates the statistic for any
/// assignment of `n_b` pooled points to the first group in `O(n_b^2)`.
struct PooledKernel {
    n: usize,
    nb: usize,
    matrix: Vec<f64>,
    row_sums: Vec<f64>,
    total: f64,
}

impl PooledKernel {
    /// `pooled` is row-major with `k` columns; the first `nb` rows form group b.
    fn new(pooled: &[f64], k: usize, nb: usize, h: f64) -> Self {
        let n = pooled.len() / k;
        let kern = ConvolvedKernel::new(h, k);
        let mut matrix = vec![0.0; n * n];
        for i in 0..n {
            let xi = &pooled[i * k..(i + 1) * k];
            matrix[i * n + i] = kern.norm;
            for j in i + 1..n {
                let v = kern.eval(xi, &pooled[j * k..(j + 1) * k]);
                matrix[i * n + j] = v;
                matrix[j * n + i] = v;
            }
        }
        let row_sums: Vec<f64> = matrix.chunks_exact(n).map(|r| r.iter().sum()).collect();
        let total = row_sums.iter().sum();
        Self {
            n,
            nb,
            matrix,
            row_sums,
            total,
        }
    }

    /// Statistic with group b = `members` (length `nb`).
    fn statistic(&self, members: &[usize]) -> f64 {
        let n = self.n;
        let mut off = 0.0;
        for (a, &i) in members.iter().enumerate() {
            let row = &self.matrix[i * n..(i + 1) * n];
            off += members[a + 1..].iter().map(|&j| row[j]).sum::<f64>();
        }
        let diag: f64 = members.iter().map(|&i| self.matrix[i * n + i]).sum();
        let s_bb = 2.0 * off + diag;
        let s_b_all: f64 = members.iter().map(|&i| self.row_sums[i]).sum();
        let s_bs = s_b_all - s_bb;
        let s_ss = self.total - s_bb - 2.0 * s_bs;
        let nb = self.nb as f64;
        let ns = (n - self.nb) as f64;
        (s_bb / (nb * nb) - 2.0 * s_bs / (nb * ns) + s_ss / (ns * ns)).max(0.0)
    }

    fn test(&self, n_perm: usize, seed: u64) -> IseTestOutcome {
        let identity: Vec<usize> = (0..self.nb).collect();
        let observed = self.statistic(&identity);
        // guard against rounding differences between algebraically equal sums
        let cut = observed - 1e-12 * observed.abs();
        let mut rng = seed::rng(seed);
        let mut order: Vec<usize> = (0..self.n).collect();
        let mut exceed = 0usize;
        for _ in 0..n_perm {
            order.shuffle(&mut rng);
            if self.statistic(&order[..self.nb]) >= cut {
                exceed += 1;
            }
        }
        IseTestOutcome {
            statistic: observed,
            p_value: (1 + exceed) as f64 / (n_perm + 1) as f64,
            permutations: n_perm,
        }
    }
}

fn check_permutations(n_perm: usize) -> Result<()> {
    if n_perm < MIN_PERMUTATIONS {
        return Err(Error::InvalidParameter(format!(
            "n_perm = {n_perm} below the minimum {MIN_PERMUTATIONS}"
        )));
    }
    Ok(())
}

/// Permutation test of equal distributions based on [`ise_statistic`].
///
/// `p = (1 + #{T_perm >= T_obs}) / (n_perm + 1)`, deterministic given `seed`.
pub fn ise_test(
    xb: &Dataset,
    xbs: &Dataset,
    h: f64,
    n_perm: usize,
    seed: u64,
) -> Result<IseTestOutcome> {
    check_pair(xb, xbs, h)?;
    check_permutations(n_perm)?;
    let mut pooled = xb.values().to_vec();
    pooled.extend_from_slice(xbs.values());
    Ok(PooledKernel::new(&pooled, xb.d(), xb.n(), h).test(n_perm, seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarSelectConfig {
    /// Number of random subsets drawn.
    pub iterations: usize,
    /// Subset size.
    pub k: usize,
    /// p-value below which the drawn variables are credited.
    pub threshold: f64,
    pub n_perm: usize,
    /// Per-group row cap for each test; larger samples are subsampled
    /// without replacement, independently per iteration. `None` disables.
    pub max_sample: Option<usize>,
}

impl Default for VarSelectConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            k: 3,
            threshold: 0.01,
            n_perm: 199,
            max_sample: Some(500),
        }
    }
}

impl VarSelectConfig {
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::InvalidParameter("iterations must be >= 1".into()));
        }
        if self.k == 0 || self.k >= d {
            return Err(Error::InvalidParameter(format!(
                "subset size k = {} must satisfy 1 <= k < d = {d}",
                self.k
            )));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "threshold {} not in (0, 1]",
                self.threshold
            )));
        }
        if matches!(self.max_sample, Some(m) if m < 2) {
            return Err(Error::InvalidParameter("max_sample must be >= 2".into()));
        }
        check_permutations(self.n_perm)
    }
}

/// Per-variable tally of significant subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceCounter {
    pub counts: Vec<u64>,
    /// Subsets drawn containing each variable.
    pub draws: Vec<u64>,
    pub iterations: usize,
    pub k: usize,
    pub threshold: f64,
    /// Iterations whose test fell below the threshold.
    pub rejections: usize,
}

impl RelevanceCounter {
    /// Share of each variable's subsets that were significant (0 when never
    /// drawn).
    pub fn rates(&self) -> Vec<f64> {
        self.counts
            .iter()
            .zip(&self.draws)
            .map(|(&c, &n)| if n == 0 { 0.0 } else { c as f64 / n as f64 })
            .collect()
    }

    /// Writes `variable,count,draws` rows.
    pub fn write_csv(&self, names: &[String], path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        if names.len() != self.counts.len() {
            return Err(Error::DimensionMismatch {
                expected: self.counts.len(),
                found: names.len(),
            });
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["variable", "count", "draws"])?;
        for ((name, c), n) in names.iter().zip(&self.counts).zip(&self.draws) {
            w.write_record([name.as_str(), &c.to_string(), &n.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub counter: RelevanceCounter,
    /// Selected variable indices, ascending; empty means no relevance signal.
    pub selected: Vec<usize>,
}

/// Splits the variables at the largest gap of their significance shares
/// (`counts / draws`, sorted descending) and keeps the top block when it
/// stands out: its mean share exceeds twice the rest's mean share, and each
/// kept count exceeds its chance level `n t + 3 sqrt(n t)` for `n` draws
/// (expected false rejections plus three Poisson standard deviations).
///
/// Shares rather than raw counts are compared because a variable drawn more
/// often collects more credit regardless of its relevance.
pub fn gap_selection(counts: &[u64], draws: &[u64], threshold: f64) -> Vec<usize> {
    let d = counts.len();
    if d < 2 || draws.len() != d {
        return Vec::new();
    }
    let rate = |j: usize| {
        if draws[j] == 0 {
            0.0
        } else {
            counts[j] as f64 / draws[j] as f64
        }
    };
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| rate(b).total_cmp(&rate(a)).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&j| rate(j)).collect();
    let mut cut = 1;
    let mut best = 0.0;
    for j in 1..d {
        let gap = sorted[j - 1] - sorted[j];
        if gap > best {
            best = gap;
            cut = j;
        }
    }
    if best == 0.0 {
        return Vec::new();
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    if mean(&sorted[..cut]) <= 2.0 * mean(&sorted[cut..]) {
        return Vec::new();
    }
    let above_chance = |j: usize| {
        let chance = draws[j] as f64 * threshold;
        counts[j] as f64 > chance + 3.0 * chance.sqrt()
    };
    if !order[..cut].iter().all(|&j| above_chance(j)) {
        return Vec::new();
    }
    let mut chosen = order[..cut].to_vec();
    chosen.sort_unstable();
    chosen
}

fn gather(values: &[f64], d: usize, rows: &[usize], cols: &[usize], out: &mut Vec<f64>) {
    for &i in rows {
        let row = &values[i * d..(i + 1) * d];
        out.extend(cols.iter().map(|&j| row[j]));
    }
}

/// Runs `cfg.iterations` subset tests and applies [`gap_selection`].
///
/// Iteration `i` uses the stream `seed::derive(seed, i)` for its subset draw,
/// row subsampling and permutations, so results do not depend on scheduling.
/// Each test uses the normal-scale bandwidth of the projected background.
pub fn select_variables(
    xb: &Dataset,
    xbs: &Dataset,
    cfg: &VarSelectConfig,
    seed: u64,
) -> Result<Selection> {
    if xb.d() != xbs.d() {
        return Err(Error::DimensionMismatch {
            expected: xb.d(),
            found: xbs.d(),
        });
    }
    let d = xb.d();
    cfg.validate(d)?;
    if xb.n() < 2 || xbs.n() < 2 {
        return Err(Error::InvalidData(
            "variable selection needs at least two rows per sample".into(),
        ));
    }
    let draws: Vec<Result<(Vec<usize>, bool)>> = (0..cfg.iterations)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed::derive(seed, i as u64));
            let mut cols = sample(&mut rng, d, cfg.k).into_vec();
            cols.sort_unstable();
            let mut rows_of = |n: usize| -> Vec<usize> {
                match cfg.max_sample {
                    Some(m) if n > m => {
                        let mut r = sample(&mut rng, n, m).into_vec();
                        r.sort_unstable();
                        r
                    }
                    _ => (0..n).collect(),
                }
            };
            let rb = rows_of(xb.n());
            let rs = rows_of(xbs.n());
            let mut pooled = Vec::with_capacity((rb.len() + rs.len()) * cfg.k);
            gather(xb.values(), d, &rb, &cols, &mut pooled);
            gather(xbs.values(), d, &rs, &cols, &mut pooled);
            let h = normal_scale(rb.len(), cfg.k);
            let outcome = PooledKernel::new(&pooled, cfg.k, rb.len(), h)
                .test(cfg.n_perm, rand::Rng::gen(&mut rng));
            Ok((cols, outcome.p_value < cfg.threshold))
        })
        .collect();
    let mut counts = vec![0u64; d];
    let mut drawn = vec![0u64; d];
    let mut rejections = 0;
    for draw in draws {
        let (cols, hit) = draw?;
        rejections += usize::from(hit);
        for j in cols {
            drawn[j] += 1;
            counts[j] += u64::from(hit);
        }
    }
    let selected = gap_selection(&counts, &drawn, cfg.threshold);
    if selected.is_empty() {
        log::info!("relevance counter shows no remarkable gap: no relevance signal");
    }
    Ok(Selection {
        counter: RelevanceCounter {
            counts,
            draws: drawn,
            iterations: cfg.iterations,
            k: cfg.k,
            threshold: cfg.threshold,
            rejections,
        },
        selected,
    })
}

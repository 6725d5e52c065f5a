//! Pair-counting agreement between two partitions of the same points.
//!
//! With `n_ij` the contingency counts, `a_i`/`b_j` the margins and
//! `C(m) = m (m - 1) / 2`:
//!
//! * `TP = sum C(n_ij)` pairs together in both partitions,
//! * `P = sum C(a_i)` pairs together in the first, `Q = sum C(b_j)` in the second.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Agreement index used as the bandwidth-search objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementIndex {
    #[default]
    FowlkesMallows,
    AdjustedRand,
    Jaccard,
}

impl AgreementIndex {
    pub fn compute(self, t: &ContingencyTable) -> Result<f64> {
        match self {
            AgreementIndex::FowlkesMallows => fowlkes_mallows(t),
            AgreementIndex::AdjustedRand => Ok(adjusted_rand(t)),
            AgreementIndex::Jaccard => Ok(jaccard(t)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    /// `counts[r][c]`: points with row label `row_labels[r]` and column label
    /// `col_labels[c]`.
    pub counts: Vec<Vec<u64>>,
    pub row_labels: Vec<usize>,
    pub col_labels: Vec<usize>,
    pub n: u64,
}

fn pairs(m: u64) -> u64 {
    m * m.saturating_sub(1) / 2
}

impl ContingencyTable {
    /// Table from raw counts; labels are the row/column positions.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let cols = counts.first().map_or(0, Vec::len);
        if counts.is_empty() || cols == 0 || counts.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidParameter(
                "contingency counts must be a non-empty rectangle".into(),
            ));
        }
        let n = counts.iter().flatten().sum();
        if n < 2 {
            return Err(Error::InvalidParameter(format!(
                "contingency table needs n >= 2, got {n}"
            )));
        }
        Ok(Self {
            row_labels: (0..counts.len()).collect(),
            col_labels: (0..cols).collect(),
            counts,
            n,
        })
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        let mut s = vec![0; self.col_labels.len()];
        for r in &self.counts {
            for (acc, v) in s.iter_mut().zip(r) {
                *acc += v;
            }
        }
        s
    }

    pub fn row_of(&self, label: usize) -> Option<usize> {
        self.row_labels.iter().position(|&l| l == label)
    }

    pub fn col_of(&self, label: usize) -> Option<usize> {
        self.col_labels.iter().position(|&l| l == label)
    }

    /// `(TP, P, Q)` pair counts.
    pub fn pair_counts(&self) -> (u64, u64, u64) {
        let tp = self.counts.iter().flatten().map(|&v| pairs(v)).sum();
        let p = self.row_sums().into_iter().map(pairs).sum();
        let q = self.col_sums().into_iter().map(pairs).sum();
        (tp, p, q)
    }
}

/// Cross-tabulates two labelings. Rows follow the sorted distinct labels of
/// `a`, columns those of `b`.
pub fn contingency(a: &[usize], b: &[usize]) -> Result<ContingencyTable> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidParameter(
            "agreement needs at least two points".into(),
        ));
    }
    let index = |labels: &[usize]| -> BTreeMap<usize, usize> {
        let distinct: BTreeMap<usize, ()> = labels.iter().map(|&l| (l, ())).collect();
        distinct
            .into_keys()
            .enumerate()
            .map(|(k, l)| (l, k))
            .collect()
    };
    let rows = index(a);
    let cols = index(b);
    let mut counts = vec![vec![0u64; cols.len()]; rows.len()];
    for (x, y) in a.iter().zip(b) {
        counts[rows[x]][cols[y]] += 1;
    }
    Ok(ContingencyTable {
        counts,
        row_labels: rows.into_keys().collect(),
        col_labels: cols.into_keys().collect(),
        n: a.len() as u64,
    })
}

/// `TP / sqrt(P Q)`. Errors when either partition has only singletons.
pub fn fowlkes_mallows(t: &ContingencyTable) -> Result<f64> {
    let (tp, p, q) = t.pair_counts();
    if p == 0 || q == 0 {
        return Err(Error::DegeneratePartition(
            "every class is a singleton".into(),
        ));
    }
    Ok(tp as f64 / ((p as f64) * (q as f64)).sqrt())
}

/// Adjusted Rand index under the permutation model. Defined as 1 when the
/// expected and maximal index coincide (e.g. both partitions single-class).
pub fn adjusted_rand(t: &ContingencyTable) -> f64 {
    let (tp, p, q) = t.pair_counts();
    let total = pairs(t.n) as f64;
    let expected = p as f64 * q as f64 / total;
    let max = 0.5 * (p as f64 + q as f64);
    let denom = max - expected;
    if denom == 0.0 {
        log::warn!("adjusted Rand index undefined (zero denominator); using 1");
        return 1.0;
    }
    (tp as f64 - expected) / denom
}

/// Pairwise Jaccard `TP / (TP + FP + FN)`; 1 when no pair is together in
/// either partition.
pub fn jaccard(t: &ContingencyTable) -> f64 {
    let (tp, p, q) = t.pair_counts();
    let denom = p + q - tp;
    if denom == 0 {
        log::warn!("Jaccard index undefined (no co-clustered pairs); using 1");
        return 1.0;
    }
    tp as f64 / denom as f64
}

/// `counts[row][col] / row margin` for the designated positive row and column.
pub fn true_positive_rate(
    t: &ContingencyTable,
    positive_row: usize,
    positive_col: usize,
) -> Result<f64> {
    let row = t
        .counts
        .get(positive_row)
        .ok_or_else(|| Error::InvalidParameter(format!("row {positive_row} out of range")))?;
    let hit = *row
        .get(positive_col)
        .ok_or_else(|| Error::InvalidParameter(format!("column {positive_col} out of range")))?;
    let margin: u64 = row.iter().sum();
    if margin == 0 {
        return Err(Error::InvalidParameter(format!(
            "row {positive_row} has zero margin"
        )));
    }
    Ok(hit as f64 / margin as f64)
}

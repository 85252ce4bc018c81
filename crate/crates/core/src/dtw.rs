//! Dynamic time warping distances and the fleet-wide distance matrix.
//!
//! The distance is the classic O(|a|*|b|) dynamic program over monotone
//! warping paths with steps {(1,0),(0,1),(1,1)}, anchored at both ends.
//! Local cost between aligned elements is `|a - b|` by default.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;

#[derive(Debug, Error)]
pub enum DtwError {
    #[error("dtw requires non-empty sequences")]
    EmptySequence,
    #[error("dtw input contains a non-finite value")]
    NonFinite,
    #[error("dtw matrix requires a normalized dataset")]
    NotNormalized,
    #[error("dtw matrix requires at least 2 series, got {0}")]
    TooFewSeries(usize),
    #[error("distance matrix parse error: {0}")]
    Parse(String),
}

/// Local cost between two aligned scalar elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    /// `|a - b|`, the Euclidean distance in one dimension.
    #[default]
    Abs,
    /// `(a - b)^2`.
    Squared,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DtwOptions {
    /// Sakoe-Chiba band half-width `|i - j| <= window`; `None` means
    /// unconstrained. The band is widened to `|len(a) - len(b)|` when
    /// narrower, otherwise no path exists.
    pub window: Option<usize>,
    pub cost: CostKind,
}

#[inline]
fn local_cost(a: f64, b: f64, kind: CostKind) -> f64 {
    let d = a - b;
    match kind {
        CostKind::Abs => d.abs(),
        CostKind::Squared => d * d,
    }
}

/// DTW distance between two sequences.
pub fn dtw_distance(a: &[f64], b: &[f64], opts: DtwOptions) -> Result<f64, DtwError> {
    if a.is_empty() || b.is_empty() {
        return Err(DtwError::EmptySequence);
    }
    if !a.iter().chain(b).all(|v| v.is_finite()) {
        return Err(DtwError::NonFinite);
    }
    let n = a.len();
    let m = b.len();
    let window = opts
        .window
        .map(|w| w.max(n.abs_diff(m)))
        .unwrap_or(usize::MAX);

    // Two-row DP over the (n+1) x (m+1) grid with an infinite border; the
    // top-left corner is the only zero-cost entry, anchoring the path start.
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut curr = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        curr[0] = f64::INFINITY;
        let lo = if window == usize::MAX { 1 } else { i.saturating_sub(window).max(1) };
        let hi = if window == usize::MAX { m } else { (i + window).min(m) };
        for j in 1..lo {
            curr[j] = f64::INFINITY;
        }
        for j in lo..=hi {
            let c = local_cost(a[i - 1], b[j - 1], opts.cost);
            let best = prev[j].min(curr[j - 1]).min(prev[j - 1]);
            curr[j] = c + best;
        }
        for j in (hi + 1)..=m {
            curr[j] = f64::INFINITY;
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    Ok(prev[m])
}

/// Symmetric pairwise DTW distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    /// Build from full rows, validating symmetry, the zero diagonal, and
    /// finiteness.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, DtwError> {
        let n = rows.len();
        let mut data = vec![0.0; n * n];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(DtwError::Parse(format!("row {i} has length {}", row.len())));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v < 0.0 || (i == j && v != 0.0) || (rows[j][i] != v) {
                    return Err(DtwError::Parse(format!("invalid entry at ({i},{j})")));
                }
                data[i * n + j] = v;
            }
        }
        Ok(Self { n, data })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Build from the upper-triangle entries (`i < j`, row-major order).
    fn from_upper(n: usize, upper: &[f64]) -> Result<Self, DtwError> {
        let mut data = vec![0.0; n * n];
        let mut it = upper.iter();
        for i in 0..n {
            for j in (i + 1)..n {
                let v = *it.next().expect("upper triangle size");
                if !v.is_finite() || v < 0.0 {
                    return Err(DtwError::NonFinite);
                }
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        Ok(Self { n, data })
    }

    /// CSV form used by the on-disk cache: `i,j,distance` for `i < j`.
    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut out = String::from("i,j,distance\n");
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                out.push_str(&format!("{i},{j},{}\n", self.get(i, j)));
            }
        }
        out.into_bytes()
    }

    pub fn from_csv_bytes(bytes: &[u8], n: usize) -> Result<Self, DtwError> {
        let text = std::str::from_utf8(bytes).map_err(|e| DtwError::Parse(e.to_string()))?;
        let mut upper = vec![f64::NAN; n * (n - 1) / 2];
        let mut seen = 0usize;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with('i') {
                continue;
            }
            let mut parts = line.split(',');
            let bad = || DtwError::Parse(format!("bad row {line:?}"));
            let i: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let j: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            let v: f64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
            if i >= j || j >= n {
                return Err(DtwError::Parse(format!("indices out of range in {line:?}")));
            }
            let flat = i * n - i * (i + 1) / 2 + (j - i - 1);
            upper[flat] = v;
            seen += 1;
        }
        if seen != upper.len() {
            return Err(DtwError::Parse(format!(
                "expected {} entries, found {seen}",
                upper.len()
            )));
        }
        Self::from_upper(n, &upper)
    }
}

/// Pairwise DTW distances over a normalized dataset.
///
/// Pairs are evaluated in parallel; the result is independent of schedule
/// because each entry is a pure function of its pair.
pub fn dtw_matrix(d: &Dataset, opts: DtwOptions) -> Result<DistanceMatrix, DtwError> {
    if !d.normalized {
        return Err(DtwError::NotNormalized);
    }
    let n = d.len();
    if n < 2 {
        return Err(DtwError::TooFewSeries(n));
    }
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let upper = pairs
        .par_iter()
        .map(|&(i, j)| dtw_distance(&d.series[i].values, &d.series[j].values, opts))
        .collect::<Result<Vec<_>, _>>()?;
    DistanceMatrix::from_upper(n, &upper)
}

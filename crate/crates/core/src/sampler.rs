//! Triplet sampling: anchors and positives from one series, negatives from
//! its DTW-furthest neighbors.
//!
//! Lengths and offsets are drawn uniformly: the positive length over
//! `[1, s_i]`, the anchor length over `[pos_len, s_i]`, the anchor position
//! over the valid range of the series, the positive position within the
//! anchor, and each negative subsequence over its own source series. The
//! k-th negative comes from the k-th furthest neighbor, so a triplet always
//! carries exactly K negatives from K distinct series.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::data::Dataset;
use crate::dtw::DistanceMatrix;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("K must be at least 1")]
    ZeroK,
    #[error("K={k} exceeds n-1={max} available neighbor series")]
    TooManyNeighbors { k: usize, max: usize },
    #[error("series index {0} out of range")]
    BadIndex(usize),
    #[error("dataset must be normalized before sampling")]
    NotNormalized,
    #[error("distance matrix is {m} x {m} but dataset has {n} series")]
    Mismatch { m: usize, n: usize },
}

/// Half-open window into a series: `offset .. offset + len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Span {
    pub offset: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.offset + self.len
    }

    pub fn contains(&self, other: &Span) -> bool {
        other.offset >= self.offset && other.end() <= self.end()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct NegativeRef {
    pub series: usize,
    pub span: Span,
}

/// One training example: an anchor/positive pair plus K negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Triplet {
    pub series: usize,
    pub anchor: Span,
    pub positive: Span,
    pub negatives: Vec<NegativeRef>,
}

impl Triplet {
    /// Audit the structural invariants against the dataset and, when the
    /// triplet was drawn by [`sample_triplet`], the neighbor set.
    pub fn validate(&self, d: &Dataset, neighbors: Option<&[usize]>) -> bool {
        let s_i = d.series[self.series].len();
        let bounds_ok = self.positive.len >= 1
            && self.positive.len <= self.anchor.len
            && self.anchor.len <= s_i
            && self.anchor.end() <= s_i
            && self.anchor.contains(&self.positive);
        let negatives_ok = self.negatives.iter().all(|neg| {
            let s_k = d.series[neg.series].len();
            neg.series != self.series
                && neg.span.len >= 1
                && neg.span.len <= s_k
                && neg.span.end() <= s_k
                && neighbors.is_none_or(|ns| ns.contains(&neg.series))
        });
        bounds_ok && negatives_ok
    }
}

/// The K series furthest from `i` by DTW distance, descending; ties broken
/// by ascending index.
pub fn furthest_neighbors(
    m: &DistanceMatrix,
    i: usize,
    k: usize,
) -> Result<Vec<usize>, SamplerError> {
    let n = m.n();
    if i >= n {
        return Err(SamplerError::BadIndex(i));
    }
    if k == 0 {
        return Err(SamplerError::ZeroK);
    }
    if k > n - 1 {
        return Err(SamplerError::TooManyNeighbors { k, max: n - 1 });
    }
    let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    others.sort_by(|&a, &b| {
        m.get(i, b)
            .partial_cmp(&m.get(i, a))
            .expect("matrix entries are finite")
            .then(a.cmp(&b))
    });
    others.truncate(k);
    Ok(others)
}

fn sample_span(rng: &mut impl Rng, max_len: usize) -> Span {
    let len = rng.random_range(1..=max_len);
    let offset = rng.random_range(0..=(max_len - len));
    Span { offset, len }
}

/// Draw one triplet for series `i` with negatives from its DTW-furthest
/// neighbors.
pub fn sample_triplet(
    d: &Dataset,
    i: usize,
    m: &DistanceMatrix,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Triplet, SamplerError> {
    if !d.normalized {
        return Err(SamplerError::NotNormalized);
    }
    if m.n() != d.len() {
        return Err(SamplerError::Mismatch { m: m.n(), n: d.len() });
    }
    let neighbors = furthest_neighbors(m, i, k)?;
    Ok(draw(d, i, &neighbors, rng))
}

/// Baseline sampler: negatives drawn from uniformly random other series
/// instead of DTW-furthest ones. Comparison mode only.
pub fn sample_triplet_random(
    d: &Dataset,
    i: usize,
    k: usize,
    rng: &mut impl Rng,
) -> Result<Triplet, SamplerError> {
    if !d.normalized {
        return Err(SamplerError::NotNormalized);
    }
    let n = d.len();
    if i >= n {
        return Err(SamplerError::BadIndex(i));
    }
    if k == 0 {
        return Err(SamplerError::ZeroK);
    }
    if n < 2 {
        return Err(SamplerError::TooManyNeighbors { k, max: 0 });
    }
    let neighbors: Vec<usize> = (0..k)
        .map(|_| {
            // Uniform over series other than i, with replacement.
            let j = rng.random_range(0..n - 1);
            if j >= i {
                j + 1
            } else {
                j
            }
        })
        .collect();
    Ok(draw(d, i, &neighbors, rng))
}

fn draw(d: &Dataset, i: usize, neighbor_series: &[usize], rng: &mut impl Rng) -> Triplet {
    let s_i = d.series[i].len();
    let pos_len = rng.random_range(1..=s_i);
    let anchor_len = rng.random_range(pos_len..=s_i);
    let anchor_off = rng.random_range(0..=(s_i - anchor_len));
    let pos_off = rng.random_range(anchor_off..=(anchor_off + anchor_len - pos_len));
    let negatives = neighbor_series
        .iter()
        .map(|&j| NegativeRef {
            series: j,
            span: sample_span(rng, d.series[j].len()),
        })
        .collect();
    Triplet {
        series: i,
        anchor: Span {
            offset: anchor_off,
            len: anchor_len,
        },
        positive: Span {
            offset: pos_off,
            len: pos_len,
        },
        negatives,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SensorSeries;
    use std::collections::HashSet;

    fn matrix(rows: &[&[f64]]) -> DistanceMatrix {
        DistanceMatrix::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn dataset(lens: &[usize]) -> Dataset {
        let series = lens
            .iter()
            .enumerate()
            .map(|(k, &len)| {
                let ts: Vec<i64> = (0..len as i64).map(|t| t * 14400).collect();
                let vals: Vec<f64> = (0..len).map(|t| -(t as f64) - k as f64).collect();
                SensorSeries::new(format!("s{k}"), ts, vals).unwrap()
            })
            .collect();
        let mut d = Dataset::from_series(series).unwrap();
        d.normalized = true;
        d
    }

    #[test]
    fn furthest_picks_largest() {
        let m = matrix(&[&[0.0, 1.0, 5.0], &[1.0, 0.0, 2.0], &[5.0, 2.0, 0.0]]);
        assert_eq!(furthest_neighbors(&m, 0, 1).unwrap(), vec![2]);
        assert_eq!(furthest_neighbors(&m, 0, 2).unwrap(), vec![2, 1]);
    }

    #[test]
    fn ties_break_by_ascending_index() {
        let m = matrix(&[&[0.0, 3.0, 3.0], &[3.0, 0.0, 3.0], &[3.0, 3.0, 0.0]]);
        assert_eq!(furthest_neighbors(&m, 0, 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn k_too_large_is_error() {
        let m = matrix(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert!(matches!(
            furthest_neighbors(&m, 0, 2),
            Err(SamplerError::TooManyNeighbors { k: 2, max: 1 })
        ));
    }

    #[test]
    fn negatives_cover_all_other_series_when_k_is_n_minus_1() {
        let d = dataset(&[8, 8, 8]);
        let m = matrix(&[&[0.0, 1.0, 2.0], &[1.0, 0.0, 3.0], &[2.0, 3.0, 0.0]]);
        let mut rng = crate::rng::stream(1, "sampler", &[]);
        let t = sample_triplet(&d, 0, &m, 2, &mut rng).unwrap();
        let series: HashSet<usize> = t.negatives.iter().map(|n| n.series).collect();
        assert_eq!(series, HashSet::from([1, 2]));
    }

    #[test]
    fn length_one_series_collapses() {
        // A length-1 anchor series forces pos = anchor = the whole series.
        let mut d = dataset(&[4, 4]);
        d.series[0] = SensorSeries {
            sensor_id: "s0".into(),
            timestamps: vec![0],
            values: vec![-1.0],
        };
        let m = matrix(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let mut rng = crate::rng::stream(2, "sampler", &[]);
        for _ in 0..50 {
            let t = sample_triplet(&d, 0, &m, 1, &mut rng).unwrap();
            assert_eq!(t.anchor, Span { offset: 0, len: 1 });
            assert_eq!(t.positive, t.anchor);
        }
    }

    #[test]
    fn fixed_seed_reproduces_triplet() {
        let d = dataset(&[30, 25, 40]);
        let m = matrix(&[&[0.0, 4.0, 9.0], &[4.0, 0.0, 2.0], &[9.0, 2.0, 0.0]]);
        let mut a = crate::rng::stream(42, "triplet", &[0]);
        let mut b = crate::rng::stream(42, "triplet", &[0]);
        let ta = sample_triplet(&d, 0, &m, 2, &mut a).unwrap();
        let tb = sample_triplet(&d, 0, &m, 2, &mut b).unwrap();
        assert_eq!(ta, tb);
    }

    #[test]
    fn fuzz_invariants_hold() {
        let d = dataset(&[17, 5, 9, 28]);
        let m = matrix(&[
            &[0.0, 2.0, 8.0, 1.0],
            &[2.0, 0.0, 3.0, 5.0],
            &[8.0, 3.0, 0.0, 4.0],
            &[1.0, 5.0, 4.0, 0.0],
        ]);
        let mut rng = crate::rng::stream(3, "sampler-fuzz", &[]);
        for draw_ix in 0..10_000 {
            let i = draw_ix % 4;
            let neighbors = furthest_neighbors(&m, i, 2).unwrap();
            let t = sample_triplet(&d, i, &m, 2, &mut rng).unwrap();
            assert!(t.validate(&d, Some(&neighbors)), "draw {draw_ix}: {t:?}");
        }
    }

    #[test]
    fn negative_support_is_exactly_the_neighbor_set() {
        let d = dataset(&[10, 10, 10, 10, 10]);
        let m = matrix(&[
            &[0.0, 9.0, 8.0, 1.0, 2.0],
            &[9.0, 0.0, 1.0, 1.0, 1.0],
            &[8.0, 1.0, 0.0, 1.0, 1.0],
            &[1.0, 1.0, 1.0, 0.0, 1.0],
            &[2.0, 1.0, 1.0, 1.0, 0.0],
        ]);
        let expected: HashSet<usize> = HashSet::from([1, 2]);
        let mut seen = HashSet::new();
        let mut rng = crate::rng::stream(4, "sampler-support", &[]);
        for _ in 0..10_000 {
            let t = sample_triplet(&d, 0, &m, 2, &mut rng).unwrap();
            for n in &t.negatives {
                seen.insert(n.series);
                assert!(expected.contains(&n.series));
            }
        }
        assert_eq!(seen, expected);
    }

    #[test]
    fn anchor_length_conditionally_uniform() {
        // Chi-square sanity: with s_i = 5 and s_pos = 2, anchor length is
        // uniform on {2,3,4,5}. Critical value for df=3 at 1%: 11.345.
        let d = dataset(&[5, 5]);
        let m = matrix(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let mut rng = crate::rng::stream(5, "sampler-chi2", &[]);
        let mut counts = [0u32; 4];
        let mut total = 0u32;
        for _ in 0..20_000 {
            let t = sample_triplet(&d, 0, &m, 1, &mut rng).unwrap();
            assert!(t.positive.len <= t.anchor.len);
            if t.positive.len == 2 {
                counts[t.anchor.len - 2] += 1;
                total += 1;
            }
        }
        let expected = total as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let diff = c as f64 - expected;
                diff * diff / expected
            })
            .sum();
        assert!(chi2 < 11.345, "chi2={chi2} counts={counts:?}");
    }

    #[test]
    fn random_baseline_avoids_anchor_series() {
        let d = dataset(&[6, 6, 6]);
        let mut rng = crate::rng::stream(6, "sampler-rand", &[]);
        for _ in 0..2000 {
            let t = sample_triplet_random(&d, 1, 4, &mut rng).unwrap();
            assert!(t.negatives.iter().all(|n| n.series != 1));
        }
    }
}

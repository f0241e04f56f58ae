//! Distances, linear interpolation between embeddings, exact k-nearest-neighbor
//! search and pairwise-distance percentiles.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedstore::EmbeddingDataset;
use crate::error::{check_len, Error, Result};

/// Squared Euclidean distance accumulated in f64. Caller checks lengths.
#[inline]
pub(crate) fn sq_dist<A, B>(x: &[A], y: &[B]) -> f64
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    x.iter()
        .zip(y)
        .map(|(&a, &b)| {
            let d = a.into() - b.into();
            d * d
        })
        .sum()
}

pub fn l2_distance<A, B>(x: &[A], y: &[B]) -> Result<f64>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    check_len("vector length", x.len(), y.len())?;
    Ok(sq_dist(x, y).sqrt())
}

fn check_ratio(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::out_of_range(
            "interpolation ratio",
            format!("{r} is outside [0, 1]"),
        ));
    }
    Ok(())
}

/// `r * e_a + (1 - r) * e_b`, elementwise.
pub fn interpolate<A, B>(e_a: &[A], e_b: &[B], r: f64) -> Result<Vec<f64>>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    check_len("vector length", e_a.len(), e_b.len())?;
    check_ratio(r)?;
    let s = 1.0 - r;
    Ok(e_a
        .iter()
        .zip(e_b)
        .map(|(&a, &b)| r * a.into() + s * b.into())
        .collect())
}

/// One evaluation pair: concept A, concept B and the weight on A.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpolationSpec {
    pub index_a: usize,
    pub index_b: usize,
    pub ratio: f64,
}

impl InterpolationSpec {
    pub fn new(index_a: usize, index_b: usize, ratio: f64, anchor_count: usize) -> Result<Self> {
        check_ratio(ratio)?;
        if index_a == index_b {
            return Err(Error::Invalid(format!(
                "interpolation pair uses the same row {index_a} twice"
            )));
        }
        for idx in [index_a, index_b] {
            if idx >= anchor_count {
                return Err(Error::out_of_range(
                    "row index",
                    format!("{idx} >= {anchor_count}"),
                ));
            }
        }
        Ok(InterpolationSpec {
            index_a,
            index_b,
            ratio,
        })
    }
}

/// Interpolated embedding in both spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolatedPair {
    pub pooled: Vec<f64>,
    /// `T x D`.
    pub hidden: Array2<f64>,
}

pub fn interpolate_pair(dataset: &EmbeddingDataset, spec: &InterpolationSpec) -> Result<InterpolatedPair> {
    let spec = InterpolationSpec::new(spec.index_a, spec.index_b, spec.ratio, dataset.len())?;
    let pa = dataset.pooled_row(spec.index_a);
    let pb = dataset.pooled_row(spec.index_b);
    let pooled = interpolate(
        pa.as_slice().expect("standard layout"),
        pb.as_slice().expect("standard layout"),
        spec.ratio,
    )?;
    let flat = dataset.hidden_flat();
    let hidden = interpolate(
        flat.row(spec.index_a).as_slice().expect("standard layout"),
        flat.row(spec.index_b).as_slice().expect("standard layout"),
        spec.ratio,
    )?;
    let hidden = Array2::from_shape_vec((dataset.token_count(), dataset.hidden_dim()), hidden)
        .expect("flat length is T*D");
    Ok(InterpolatedPair { pooled, hidden })
}

/// Entry of a pairs file: words resolved against a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub a: String,
    pub b: String,
    pub r: f64,
}

pub fn read_pairs_file(path: impl AsRef<Path>) -> Result<Vec<PairEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn resolve_pairs(entries: &[PairEntry], dataset: &EmbeddingDataset) -> Result<Vec<InterpolationSpec>> {
    entries
        .iter()
        .map(|p| {
            let a = dataset
                .index_of(&p.a)
                .ok_or_else(|| Error::UnknownWord(p.a.clone()))?;
            let b = dataset
                .index_of(&p.b)
                .ok_or_else(|| Error::UnknownWord(p.b.clone()))?;
            InterpolationSpec::new(a, b, p.r, dataset.len())
        })
        .collect()
}

/// The `k` nearest anchors, ascending by distance.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NeighborList {
    pub indices: Vec<usize>,
    pub distances: Vec<f64>,
}

impl NeighborList {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[inline]
fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Exact brute-force k-NN under L2. Equal distances resolve to the lower
/// anchor index.
pub fn knn<Q, A>(query: &[Q], anchors: ArrayView2<'_, A>, k: usize) -> Result<NeighborList>
where
    Q: Copy + Into<f64>,
    A: Copy + Into<f64>,
{
    let n = anchors.nrows();
    if k == 0 || k > n {
        return Err(Error::out_of_range(
            "k",
            format!("{k} must be in 1..={n} (anchor count)"),
        ));
    }
    check_len("query dimension", anchors.ncols(), query.len())?;

    let mut scored: Vec<(f64, usize)> = anchors
        .outer_iter()
        .enumerate()
        .map(|(i, row)| match row.as_slice() {
            Some(s) => (sq_dist(query, s), i),
            None => {
                let s: Vec<f64> = row.iter().map(|&v| v.into()).collect();
                (sq_dist(query, &s), i)
            }
        })
        .collect();

    if k < n {
        scored.select_nth_unstable_by(k - 1, by_distance_then_index);
        scored.truncate(k);
    }
    scored.sort_unstable_by(by_distance_then_index);

    Ok(NeighborList {
        indices: scored.iter().map(|&(_, i)| i).collect(),
        distances: scored.iter().map(|&(d, _)| d.sqrt()).collect(),
    })
}

/// k-NN for every row of `queries`, run in parallel. Output order follows
/// query order.
pub fn knn_batch<Q, A>(
    queries: ArrayView2<'_, Q>,
    anchors: ArrayView2<'_, A>,
    k: usize,
) -> Result<Vec<NeighborList>>
where
    Q: Copy + Into<f64> + Sync,
    A: Copy + Into<f64> + Sync,
{
    let rows: Vec<Vec<f64>> = queries
        .outer_iter()
        .map(|r| r.iter().map(|&v| v.into()).collect())
        .collect();
    rows.par_iter().map(|q| knn(q, anchors, k)).collect()
}

/// Percentile of an ascending-sorted sample by linear interpolation at
/// index `p/100 * (m - 1)`.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Invalid("percentile of an empty sample".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::out_of_range("percentile", format!("{p} is outside [0, 100]")));
    }
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

pub fn pairwise_distances<A>(points: ArrayView2<'_, A>) -> Vec<f64>
where
    A: Copy + Into<f64> + Sync,
{
    let rows: Vec<Vec<f64>> = points
        .outer_iter()
        .map(|r| r.iter().map(|&v| v.into()).collect())
        .collect();
    let n = rows.len();
    (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let rows = &rows;
            (i + 1..n).map(move |j| sq_dist(&rows[i], &rows[j]).sqrt())
        })
        .collect()
}

/// Percentile `p` (0..=100) of all `n choose 2` pairwise L2 distances.
pub fn pairwise_percentile<A>(points: ArrayView2<'_, A>, p: f64) -> Result<f64>
where
    A: Copy + Into<f64> + Sync,
{
    if points.nrows() < 2 {
        return Err(Error::Invalid(format!(
            "pairwise percentile needs at least 2 points, got {}",
            points.nrows()
        )));
    }
    let mut d = pairwise_distances(points);
    d.sort_unstable_by(f64::total_cmp);
    percentile_sorted(&d, p)
}

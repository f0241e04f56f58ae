//! Conversion-quality metrics.
//!
//! All hidden-space comparisons use flattened `T*D` rows. Neighborhood rank
//! correlation is computed over the union of the two `ell`-NN sets, using
//! each anchor's global rank (ties averaged) in its own space.

use std::collections::BTreeMap;

use ndarray::{ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::embedstore::EmbeddingDataset;
use crate::error::{check_len, Error, Result};
use crate::geometry::sq_dist;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RankCorrConfig {
    pub ell: usize,
}

impl RankCorrConfig {
    pub fn validate(&self, anchor_count: usize) -> Result<()> {
        if self.ell == 0 || self.ell > anchor_count {
            return Err(Error::out_of_range(
                "ell",
                format!("{} must be in 1..={anchor_count} (anchor count)", self.ell),
            ));
        }
        Ok(())
    }
}

fn check_pair_shapes<A, B>(gt: &ArrayView3<'_, A>, est: &ArrayView3<'_, B>) -> Result<()> {
    if gt.len_of(Axis(0)) == 0 {
        return Err(Error::Invalid("no samples to evaluate".into()));
    }
    check_len("sample count", gt.len_of(Axis(0)), est.len_of(Axis(0)))?;
    check_len("token count", gt.len_of(Axis(1)), est.len_of(Axis(1)))?;
    check_len("hidden dim", gt.len_of(Axis(2)), est.len_of(Axis(2)))?;
    Ok(())
}

fn row_sq_err<A, B>(gt: ArrayView2<'_, A>, est: ArrayView2<'_, B>) -> Vec<f64>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    gt.outer_iter()
        .zip(est.outer_iter())
        .map(|(g, e)| {
            g.iter()
                .zip(e.iter())
                .map(|(&a, &b)| {
                    let d = a.into() - b.into();
                    d * d
                })
                .sum()
        })
        .collect()
}

/// Flattened L2 error of every sample (`samples x T x D` inputs).
pub fn per_sample_l2<A, B>(gt: ArrayView3<'_, A>, est: ArrayView3<'_, B>) -> Result<Vec<f64>>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    check_pair_shapes(&gt, &est)?;
    Ok(gt
        .outer_iter()
        .zip(est.outer_iter())
        .map(|(g, e)| row_sq_err(g, e).iter().sum::<f64>().sqrt())
        .collect())
}

/// Mean over samples of `||flatten(gt) - flatten(est)||`.
pub fn l2_error<A, B>(gt: ArrayView3<'_, A>, est: ArrayView3<'_, B>) -> Result<f64>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    let per = per_sample_l2(gt, est)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Entry `t` is the mean over samples of the L2 error at token position `t`.
pub fn dimensionwise_error<A, B>(gt: ArrayView3<'_, A>, est: ArrayView3<'_, B>) -> Result<Vec<f64>>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    check_pair_shapes(&gt, &est)?;
    let samples = gt.len_of(Axis(0));
    let mut acc = vec![0.0; gt.len_of(Axis(1))];
    for (g, e) in gt.outer_iter().zip(est.outer_iter()) {
        for (a, sq) in acc.iter_mut().zip(row_sq_err(g, e)) {
            *a += sq.sqrt();
        }
    }
    Ok(acc.into_iter().map(|a| a / samples as f64).collect())
}

/// Average rank of each member of `members` within the full `distances`
/// list: one plus the number of strictly closer anchors, with tied anchors
/// sharing the mean of their positions.
fn global_ranks(distances: &[f64], members: &[usize]) -> Vec<f64> {
    let mut sorted = distances.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    members
        .iter()
        .map(|&i| {
            let d = distances[i];
            let below = sorted.partition_point(|&x| x < d);
            let through = sorted.partition_point(|&x| x <= d);
            (below + 1 + through) as f64 / 2.0
        })
        .collect()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    match (sxx == 0.0, syy == 0.0) {
        (true, true) => 1.0,
        // one side fully tied: no monotone association to measure
        (true, false) | (false, true) => 0.0,
        (false, false) => (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
    }
}

/// `ell` smallest entries of `distances`, ties by index.
fn top_ell(distances: &[f64], ell: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..distances.len()).collect();
    let cmp = |a: &usize, b: &usize| distances[*a].total_cmp(&distances[*b]).then(a.cmp(b));
    if ell < idx.len() {
        idx.select_nth_unstable_by(ell - 1, cmp);
        idx.truncate(ell);
    }
    idx
}

/// Spearman correlation between the pooled-space ranking around the
/// ground-truth query and the hidden-space ranking around the estimate.
pub fn rank_correlation<Q, E>(
    gt_pooled_query: &[Q],
    est_hidden_flat: &[E],
    dataset: &EmbeddingDataset,
    cfg: &RankCorrConfig,
) -> Result<f64>
where
    Q: Copy + Into<f64>,
    E: Copy + Into<f64>,
{
    cfg.validate(dataset.len())?;
    check_len("pooled query dimension", dataset.dim(), gt_pooled_query.len())?;
    let hidden = dataset.hidden_flat();
    check_len("flattened hidden dimension", hidden.ncols(), est_hidden_flat.len())?;

    let pooled_d: Vec<f64> = dataset
        .pooled()
        .outer_iter()
        .map(|r| sq_dist(gt_pooled_query, r.as_slice().expect("standard layout")))
        .collect();
    let hidden_d: Vec<f64> = hidden
        .outer_iter()
        .map(|r| sq_dist(est_hidden_flat, r.as_slice().expect("standard layout")))
        .collect();
    Ok(rank_correlation_from_distances(&pooled_d, &hidden_d, cfg.ell))
}

/// Same as [`rank_correlation`] on precomputed (squared or plain) distances
/// from each anchor to the query in the two spaces.
pub fn rank_correlation_from_distances(pooled: &[f64], hidden: &[f64], ell: usize) -> f64 {
    let mut union = top_ell(pooled, ell);
    union.extend(top_ell(hidden, ell));
    union.sort_unstable();
    union.dedup();
    if union.len() == 1 {
        return 1.0;
    }
    let rp = global_ranks(pooled, &union);
    let rh = global_ranks(hidden, &union);
    pearson(&rp, &rh)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleMetrics {
    pub l2_error: f64,
    /// Same order as the `ells` passed to [`evaluate`].
    pub rank_corr: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub l2_error: f64,
    /// Mean rank correlation keyed by `ell`.
    pub rank_corr: BTreeMap<usize, f64>,
    pub dimensionwise: Vec<f64>,
    pub samples: usize,
    #[serde(skip)]
    pub per_sample: Vec<SampleMetrics>,
}

/// Full evaluation over aligned samples: ground-truth pooled queries
/// (`samples x D`), ground-truth hidden (`samples x T x D`) and estimates.
pub fn evaluate<Q, G, E>(
    dataset: &EmbeddingDataset,
    gt_pooled: ArrayView2<'_, Q>,
    gt_hidden: ArrayView3<'_, G>,
    est_hidden: ArrayView3<'_, E>,
    ells: &[usize],
) -> Result<EvalReport>
where
    Q: Copy + Into<f64> + Sync,
    G: Copy + Into<f64> + Sync,
    E: Copy + Into<f64> + Sync,
{
    check_pair_shapes(&gt_hidden, &est_hidden)?;
    check_len("sample count", gt_hidden.len_of(Axis(0)), gt_pooled.nrows())?;
    check_len("token count", dataset.token_count(), gt_hidden.len_of(Axis(1)))?;
    check_len("hidden dim", dataset.hidden_dim(), gt_hidden.len_of(Axis(2)))?;
    for &ell in ells {
        RankCorrConfig { ell }.validate(dataset.len())?;
    }

    let l2 = per_sample_l2(gt_hidden, est_hidden)?;
    let samples = l2.len();
    let rank_rows: Vec<Vec<f64>> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let q: Vec<f64> = gt_pooled.row(s).iter().map(|&v| v.into()).collect();
            let e: Vec<f64> = est_hidden
                .index_axis(Axis(0), s)
                .iter()
                .map(|&v| v.into())
                .collect();
            ells.iter()
                .map(|&ell| rank_correlation(&q, &e, dataset, &RankCorrConfig { ell }))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;

    let rank_corr = ells
        .iter()
        .enumerate()
        .map(|(j, &ell)| {
            let mean = rank_rows.iter().map(|r| r[j]).sum::<f64>() / samples as f64;
            (ell, mean)
        })
        .collect();

    Ok(EvalReport {
        l2_error: l2.iter().sum::<f64>() / samples as f64,
        rank_corr,
        dimensionwise: dimensionwise_error(gt_hidden, est_hidden)?,
        samples,
        per_sample: l2
            .into_iter()
            .zip(rank_rows)
            .map(|(l2_error, rank_corr)| SampleMetrics { l2_error, rank_corr })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, Array2, Array3};

    #[test]
    fn l2_identity_and_constant() {
        let g = Array::from_shape_fn((3, 2, 4), |(s, t, d)| (s + t * d) as f64);
        assert_eq!(l2_error(g.view(), g.view()).unwrap(), 0.0);
        let a = Array3::<f64>::zeros((1, 2, 2));
        let b = Array3::<f64>::ones((1, 2, 2));
        assert_eq!(l2_error(a.view(), b.view()).unwrap(), 2.0);
    }

    #[test]
    fn l2_errors() {
        let a = Array3::<f64>::zeros((0, 2, 2));
        assert!(l2_error(a.view(), a.view()).is_err());
        let b = Array3::<f64>::zeros((1, 2, 2));
        let c = Array3::<f64>::zeros((1, 2, 3));
        assert!(l2_error(b.view(), c.view()).is_err());
        assert!(dimensionwise_error(b.view(), c.view()).is_err());
    }

    #[test]
    fn dimensionwise_locality() {
        let g = Array3::<f64>::zeros((2, 4, 3));
        assert_eq!(dimensionwise_error(g.view(), g.view()).unwrap(), vec![0.0; 4]);
        let mut e = g.clone();
        e[[0, 0, 1]] = 2.0;
        e[[1, 0, 2]] = 4.0;
        let dw = dimensionwise_error(g.view(), e.view()).unwrap();
        assert_eq!(dw, vec![3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn global_ranks_average_ties() {
        let d = [3.0, 1.0, 3.0, 0.5, 2.0];
        assert_eq!(global_ranks(&d, &[0, 1, 2, 3, 4]), vec![4.5, 2.0, 4.5, 1.0, 3.0]);
    }

    #[test]
    fn pearson_degenerate_conventions() {
        assert_eq!(pearson(&[2.0, 2.0], &[5.0, 5.0]), 1.0);
        assert_eq!(pearson(&[2.0, 2.0], &[1.0, 5.0]), 0.0);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
    }

    fn line_dataset(pooled: &[f32], hidden: &[f32]) -> EmbeddingDataset {
        let n = pooled.len();
        EmbeddingDataset::new(
            (0..n).map(|i| format!("w{i}")).collect(),
            Array2::from_shape_vec((n, 1), pooled.to_vec()).unwrap(),
            Array3::from_shape_vec((n, 1, 1), hidden.to_vec()).unwrap(),
            "",
        )
        .unwrap()
    }

    #[test]
    fn perfect_concordance_and_discordance() {
        let ds = line_dataset(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        let cfg = RankCorrConfig { ell: 2 };
        assert_eq!(rank_correlation(&[0.0], &[0.0], &ds, &cfg).unwrap(), 1.0);
        // hidden query at 4 sees the anchors in reverse order
        assert_eq!(rank_correlation(&[0.0], &[4.0], &ds, &cfg).unwrap(), -1.0);
        assert_eq!(rank_correlation(&[0.0], &[4.0], &ds, &RankCorrConfig { ell: 3 }).unwrap(), -1.0);
    }

    #[test]
    fn single_member_union_is_one() {
        let ds = line_dataset(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]);
        let r = rank_correlation(&[0.9], &[1.1], &ds, &RankCorrConfig { ell: 1 }).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn ell_out_of_range() {
        let ds = line_dataset(&[1.0, 2.0], &[1.0, 2.0]);
        assert!(rank_correlation(&[0.0], &[0.0], &ds, &RankCorrConfig { ell: 0 }).is_err());
        assert!(rank_correlation(&[0.0], &[0.0], &ds, &RankCorrConfig { ell: 3 }).is_err());
        assert!(rank_correlation(&[0.0, 1.0], &[0.0], &ds, &RankCorrConfig { ell: 1 }).is_err());
    }

    #[test]
    fn evaluate_aggregates() {
        let ds = line_dataset(&[1.0, 2.0, 3.0, 5.0], &[1.0, 2.0, 3.0, 5.0]);
        let gt_p = Array2::from_shape_vec((2, 1), vec![0.0, 6.0]).unwrap();
        let gt_h = Array3::from_shape_vec((2, 1, 1), vec![0.0, 6.0]).unwrap();
        let est = Array3::from_shape_vec((2, 1, 1), vec![0.0, 0.0]).unwrap();
        let rep = evaluate(&ds, gt_p.view(), gt_h.view(), est.view(), &[2, 4]).unwrap();
        assert_eq!(rep.samples, 2);
        assert_eq!(rep.l2_error, 3.0);
        assert_eq!(rep.dimensionwise, vec![3.0]);
        assert_eq!(rep.per_sample[0].rank_corr, vec![1.0, 1.0]);
        assert_eq!(rep.per_sample[1].rank_corr[1], -1.0);
        assert_eq!(rep.rank_corr[&4], 0.0);
        assert!(evaluate(&ds, gt_p.view(), gt_h.view(), est.view(), &[5]).is_err());
    }
}

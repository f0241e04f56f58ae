//! Pooled-to-hidden conversion: find the k nearest anchors of a pooled query,
//! express the query as an intercept-free least-squares combination of them,
//! then apply the same coefficients to the anchors' hidden-state embeddings.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::embedstore::EmbeddingDataset;
use crate::error::{check_len, Error, Result};
use crate::geometry::knn;

pub const DEFAULT_K: usize = 200;
pub const DEFAULT_RCOND: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConversionConfig {
    pub k: usize,
    /// Singular values below `solver_rcond * s_max` are treated as zero.
    pub solver_rcond: f64,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        ConversionConfig {
            k: DEFAULT_K,
            solver_rcond: DEFAULT_RCOND,
        }
    }
}

impl ConversionConfig {
    pub fn new(k: usize) -> Self {
        ConversionConfig {
            k,
            ..Default::default()
        }
    }

    pub fn validate(&self, anchor_count: usize) -> Result<()> {
        if self.k == 0 || self.k > anchor_count {
            return Err(Error::out_of_range(
                "k",
                format!("{} must be in 1..={anchor_count} (anchor count)", self.k),
            ));
        }
        check_rcond(self.solver_rcond)
    }
}

fn check_rcond(rcond: f64) -> Result<()> {
    if !rcond.is_finite() || rcond < 0.0 {
        return Err(Error::out_of_range(
            "solver_rcond",
            format!("{rcond} must be a finite non-negative number"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresFit {
    pub coefficients: Vec<f64>,
    /// `||query - sum_i alpha_i * neighbor_i||`
    pub residual_norm: f64,
    /// Number of singular values kept by the cutoff.
    pub rank: usize,
    /// Set when every neighbor is the zero vector.
    pub degenerate: bool,
}

/// Minimum-norm solution of `min ||q - N^T alpha||` with no intercept,
/// where the rows of `neighbors` (`k x D`) are the regressors.
pub fn fit_coefficients<Q, A>(
    query: &[Q],
    neighbors: ArrayView2<'_, A>,
    rcond: f64,
) -> Result<LeastSquaresFit>
where
    Q: Copy + Into<f64>,
    A: Copy + Into<f64>,
{
    let (k, dim) = neighbors.dim();
    if k == 0 {
        return Err(Error::out_of_range("k", "at least one neighbor is required"));
    }
    check_len("query dimension", dim, query.len())?;
    check_rcond(rcond)?;

    let q = DVector::from_iterator(dim, query.iter().map(|&v| v.into()));
    // columns are neighbors
    let design = DMatrix::from_fn(dim, k, |d, i| neighbors[[i, d]].into());

    let svd = nalgebra::SVD::try_new(design.clone(), true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Degenerate("SVD did not converge".into()))?;
    let s_max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    if s_max == 0.0 {
        return Ok(LeastSquaresFit {
            coefficients: vec![0.0; k],
            residual_norm: q.norm(),
            rank: 0,
            degenerate: true,
        });
    }

    let u = svd.u.as_ref().expect("U requested");
    let v_t = svd.v_t.as_ref().expect("V^T requested");
    let cutoff = rcond * s_max;
    let mut alpha = DVector::<f64>::zeros(k);
    let mut rank = 0;
    for (j, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff {
            continue;
        }
        rank += 1;
        let w = u.column(j).dot(&q) / s;
        alpha.axpy(w, &v_t.row(j).transpose(), 1.0);
    }

    let residual = &q - &design * &alpha;
    Ok(LeastSquaresFit {
        coefficients: alpha.iter().copied().collect(),
        residual_norm: residual.norm(),
        rank,
        degenerate: false,
    })
}

/// `sum_i alpha_i * hidden_i` over a `k x T x D` tensor.
pub fn combine_hidden<A>(coefficients: &[f64], neighbor_hidden: ArrayView3<'_, A>) -> Result<Array2<f64>>
where
    A: Copy + Into<f64>,
{
    let (k, t, d) = neighbor_hidden.dim();
    check_len("coefficient count", k, coefficients.len())?;
    Ok(accumulate(
        coefficients
            .iter()
            .copied()
            .zip(neighbor_hidden.axis_iter(Axis(0))),
        (t, d),
    ))
}

fn accumulate<'a, A, I>(terms: I, shape: (usize, usize)) -> Array2<f64>
where
    A: Copy + Into<f64> + 'a,
    I: Iterator<Item = (f64, ArrayView2<'a, A>)>,
{
    let mut out = Array2::<f64>::zeros(shape);
    for (alpha, h) in terms {
        out.zip_mut_with(&h, |o, &v| *o += alpha * v.into());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversionOutput {
    /// Ascending by pooled-space distance.
    pub neighbor_indices: Vec<usize>,
    pub neighbor_distances: Vec<f64>,
    pub coefficients: Vec<f64>,
    /// `T x D`.
    pub estimated_hidden: Array2<f64>,
    pub residual_norm: f64,
    pub degenerate: bool,
}

pub fn convert_pooled_to_hidden<Q>(
    query_pooled: &[Q],
    dataset: &EmbeddingDataset,
    cfg: &ConversionConfig,
) -> Result<ConversionOutput>
where
    Q: Copy + Into<f64>,
{
    cfg.validate(dataset.len())?;
    let neighbors = knn(query_pooled, dataset.pooled(), cfg.k)?;
    let neighbor_pooled = dataset.pooled().select(Axis(0), &neighbors.indices);
    let fit = fit_coefficients(query_pooled, neighbor_pooled.view(), cfg.solver_rcond)?;
    let estimated_hidden = accumulate(
        fit.coefficients
            .iter()
            .copied()
            .zip(neighbors.indices.iter().map(|&i| dataset.hidden_row(i))),
        (dataset.token_count(), dataset.hidden_dim()),
    );
    Ok(ConversionOutput {
        neighbor_indices: neighbors.indices,
        neighbor_distances: neighbors.distances,
        coefficients: fit.coefficients,
        estimated_hidden,
        residual_norm: fit.residual_norm,
        degenerate: fit.degenerate,
    })
}

/// Converts every row of `queries` in parallel; output order follows input.
pub fn convert_batch<Q>(
    queries: ArrayView2<'_, Q>,
    dataset: &EmbeddingDataset,
    cfg: &ConversionConfig,
) -> Result<Vec<ConversionOutput>>
where
    Q: Copy + Into<f64> + Sync,
{
    cfg.validate(dataset.len())?;
    check_len("query dimension", dataset.dim(), queries.ncols())?;
    let rows: Vec<Vec<f64>> = queries
        .outer_iter()
        .map(|r| r.iter().map(|&v| v.into()).collect())
        .collect();
    rows.par_iter()
        .map(|q| convert_pooled_to_hidden(q, dataset, cfg))
        .collect()
}

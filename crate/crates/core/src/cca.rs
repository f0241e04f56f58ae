//! Largest canonical correlation between two views of the same samples.
//!
//! Each centered view is factored as `U S V^T`. With a ridge `lambda` added to
//! its covariance the whitened view is `U diag(s / sqrt(s^2 + (n-1) lambda))`
//! up to rotation, so the canonical correlations are the singular values of
//! `W_x U_x^T U_y W_y`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use ndarray::{ArrayView2, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::embedstore::EmbeddingDataset;
use crate::error::{check_len, Error, Result};

pub const DEFAULT_REGULARIZATION: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CcaOutcome {
    pub correlation: f64,
    /// One of the views had no variance; `correlation` is 0.
    pub degenerate: bool,
}

struct Whitened {
    u: DMatrix<f64>,
    weights: DVector<f64>,
}

fn whiten<A: Copy + Into<f64>>(x: ArrayView2<'_, A>, regularization: f64) -> Result<Option<Whitened>> {
    let (n, p) = x.dim();
    let mut m = DMatrix::from_fn(n, p, |i, j| x[[i, j]].into());
    let raw_norm = m.norm();
    for mut col in m.column_iter_mut() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
    }
    let svd = nalgebra::SVD::try_new(m, true, false, f64::EPSILON, 0)
        .ok_or_else(|| Error::Degenerate("SVD did not converge".into()))?;
    let s = &svd.singular_values;
    let s_max = s.iter().copied().fold(0.0, f64::max);
    if s_max <= 1e-12 * raw_norm.max(f64::MIN_POSITIVE) {
        return Ok(None);
    }
    // numerically zero directions carry no signal
    let cutoff = s_max * (n.max(p) as f64) * f64::EPSILON;
    let ridge = regularization * s.iter().map(|v| v * v).sum::<f64>() / p as f64;
    let weights = s.map(|v| if v > cutoff { v / (v * v + ridge).sqrt() } else { 0.0 });
    Ok(Some(Whitened {
        u: svd.u.expect("U requested"),
        weights,
    }))
}

/// Largest canonical correlation between the columns of `x` (`n x p`) and
/// `y` (`n x q`), with a relative ridge of `regularization` times the mean
/// variance added to each within-set covariance. Clamped to `[0, 1]`.
pub fn max_canonical_correlation<A, B>(
    x: ArrayView2<'_, A>,
    y: ArrayView2<'_, B>,
    regularization: f64,
) -> Result<CcaOutcome>
where
    A: Copy + Into<f64>,
    B: Copy + Into<f64>,
{
    let n = x.nrows();
    check_len("sample count", n, y.nrows())?;
    if n < 2 {
        return Err(Error::Invalid(format!("CCA needs at least 2 samples, got {n}")));
    }
    if x.ncols() == 0 || y.ncols() == 0 {
        return Err(Error::Invalid("CCA inputs need at least one column".into()));
    }
    if !regularization.is_finite() || regularization < 0.0 {
        return Err(Error::out_of_range(
            "regularization",
            format!("{regularization} must be a finite non-negative number"),
        ));
    }
    for (name, nonfinite) in [
        ("x", x.iter().any(|&v| !v.into().is_finite())),
        ("y", y.iter().any(|&v| !v.into().is_finite())),
    ] {
        if nonfinite {
            return Err(Error::NonFinite {
                what: format!("CCA input {name}"),
                location: "some entry".into(),
            });
        }
    }

    let (Some(wx), Some(wy)) = (whiten(x, regularization)?, whiten(y, regularization)?) else {
        return Ok(CcaOutcome {
            correlation: 0.0,
            degenerate: true,
        });
    };
    let mut cross = wx.u.transpose() * &wy.u;
    for (i, mut row) in cross.row_iter_mut().enumerate() {
        row *= wx.weights[i];
    }
    for (j, mut col) in cross.column_iter_mut().enumerate() {
        col *= wy.weights[j];
    }
    let top = cross.singular_values().iter().copied().fold(0.0, f64::max);
    Ok(CcaOutcome {
        correlation: top.clamp(0.0, 1.0),
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CcaResult {
    pub tokens: Vec<usize>,
    pub max_correlation_per_token: Vec<f64>,
    /// Tokens whose hidden slice had no variance.
    pub degenerate_tokens: Vec<usize>,
    pub sample_count: usize,
    pub regularization: f64,
}

/// Canonical correlation between the pooled matrix and each requested token
/// slice of the hidden tensor. Tokens are processed in parallel.
pub fn tokenwise_cca(dataset: &EmbeddingDataset, tokens: Range<usize>, regularization: f64) -> Result<CcaResult> {
    let t = dataset.token_count();
    if tokens.start >= tokens.end || tokens.end > t {
        return Err(Error::out_of_range(
            "tokens",
            format!("{}..{} must be a non-empty range within 0..{t}", tokens.start, tokens.end),
        ));
    }
    let pooled = dataset.pooled();
    let hidden = dataset.hidden();
    let outcomes: Vec<CcaOutcome> = tokens
        .clone()
        .into_par_iter()
        .map(|tok| max_canonical_correlation(pooled, hidden.index_axis(Axis(1), tok), regularization))
        .collect::<Result<_>>()?;
    Ok(CcaResult {
        tokens: tokens.clone().collect(),
        max_correlation_per_token: outcomes.iter().map(|o| o.correlation).collect(),
        degenerate_tokens: tokens
            .zip(&outcomes)
            .filter(|(_, o)| o.degenerate)
            .map(|(t, _)| t)
            .collect(),
        sample_count: dataset.len(),
        regularization,
    })
}

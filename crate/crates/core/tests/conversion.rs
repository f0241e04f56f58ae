//! Conversion pipeline checked against independent oracles: full-sort k-NN,
//! normal-equations least squares and direct interpolation in hidden space.

use blendconv::{
    convert_pooled_to_hidden, fit_coefficients, interpolate, knn, ConversionConfig, EmbeddingDataset,
};
use ndarray::{Array2, Array3, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn full_sort_knn(query: &[f64], anchors: &Array2<f64>, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = anchors
        .outer_iter()
        .enumerate()
        .map(|(i, row)| {
            let d: f64 = row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, i)
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Gaussian elimination with full pivoting on a small dense system.
fn solve_full_pivot(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    let mut col_perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let (mut pr, mut pc, mut best) = (k, k, 0.0);
        for (r, row) in a.iter().enumerate().skip(k) {
            for (c, v) in row.iter().enumerate().skip(k) {
                if v.abs() > best {
                    best = v.abs();
                    pr = r;
                    pc = c;
                }
            }
        }
        a.swap(k, pr);
        b.swap(k, pr);
        for row in a.iter_mut() {
            row.swap(k, pc);
        }
        col_perm.swap(k, pc);
        for r in k + 1..n {
            let f = a[r][k] / a[k][k];
            for c in k..n {
                a[r][c] -= f * a[k][c];
            }
            b[r] -= f * b[k];
        }
    }
    let mut y = vec![0.0; n];
    for k in (0..n).rev() {
        let s: f64 = (k + 1..n).map(|c| a[k][c] * y[c]).sum();
        y[k] = (b[k] - s) / a[k][k];
    }
    let mut x = vec![0.0; n];
    for (k, &c) in col_perm.iter().enumerate() {
        x[c] = y[k];
    }
    x
}

/// Minimum-norm least squares through the normal equations of whichever
/// side is full rank.
fn normal_equations(q: &[f64], neighbors: &Array2<f64>) -> Vec<f64> {
    let (k, d) = neighbors.dim();
    if k <= d {
        let gram = (0..k)
            .map(|i| (0..k).map(|j| neighbors.row(i).dot(&neighbors.row(j))).collect())
            .collect();
        let rhs = (0..k).map(|i| neighbors.row(i).iter().zip(q).map(|(a, b)| a * b).sum()).collect();
        solve_full_pivot(gram, rhs)
    } else {
        let outer = (0..d)
            .map(|r| (0..d).map(|c| neighbors.column(r).dot(&neighbors.column(c))).collect())
            .collect();
        let y = solve_full_pivot(outer, q.to_vec());
        (0..k).map(|i| neighbors.row(i).iter().zip(&y).map(|(a, b)| a * b).sum()).collect()
    }
}

#[test]
fn knn_matches_full_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let anchors = gaussian(&mut rng, (100, 8));
    for _ in 0..50 {
        let q: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let got = knn(&q, anchors.view(), 10).unwrap();
        assert_eq!(got.indices, full_sort_knn(&q, &anchors, 10));
        assert!(got.distances.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn coefficients_match_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let k = rng.random_range(1..=5);
        let neighbors = gaussian(&mut rng, (k, 8));
        let q: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let fit = fit_coefficients(&q, neighbors.view(), 1e-10).unwrap();
        let oracle = normal_equations(&q, &neighbors);
        for (a, b) in fit.coefficients.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-8, "{:?} vs {:?}", fit.coefficients, oracle);
        }
    }
}

#[test]
fn underdetermined_fit_is_minimum_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let neighbors = gaussian(&mut rng, (12, 5));
    let q: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
    let fit = fit_coefficients(&q, neighbors.view(), 1e-10).unwrap();
    assert!(fit.residual_norm < 1e-10);
    let oracle = normal_equations(&q, &neighbors);
    for (a, b) in fit.coefficients.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-8);
    }
}

/// Pooled vectors are a fixed linear image of the last hidden token.
fn linear_world(rng: &mut ChaCha8Rng, n: usize, t: usize, d: usize) -> EmbeddingDataset {
    let hidden = Array3::from_shape_simple_fn((n, t, d), || rng.sample::<f64, _>(StandardNormal) as f32);
    let map = gaussian(rng, (d, d));
    let last = hidden.index_axis(Axis(1), t - 1).mapv(f64::from);
    let pooled = last.dot(&map).mapv(|v| v as f32);
    let words = (0..n).map(|i| format!("w{i}")).collect();
    EmbeddingDataset::new(words, pooled, hidden, "a photo of a <WORD>").unwrap()
}

#[test]
fn two_anchor_query_recovers_hidden_interpolation() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let ds = linear_world(&mut rng, 40, 3, 6);
    let mut checked = 0;
    for a in 0..ds.len() {
        let pa = ds.pooled_row(a).to_vec();
        let b = knn(&pa, ds.pooled(), 2).unwrap().indices[1];
        let pb = ds.pooled_row(b).to_vec();
        let q = interpolate(&pa, &pb, 0.3).unwrap();
        let nn = knn(&q, ds.pooled(), 2).unwrap();
        let mut pair = nn.indices.clone();
        pair.sort_unstable();
        let mut want = vec![a, b];
        want.sort_unstable();
        if pair != want {
            continue;
        }
        let out = convert_pooled_to_hidden(&q, &ds, &ConversionConfig::new(2)).unwrap();
        let ha: Vec<f32> = ds.hidden_row(a).iter().copied().collect();
        let hb: Vec<f32> = ds.hidden_row(b).iter().copied().collect();
        let truth = interpolate(&ha, &hb, 0.3).unwrap();
        let num: f64 = out.estimated_hidden.iter().zip(&truth).map(|(x, y)| (x - y).powi(2)).sum();
        let den: f64 = truth.iter().map(|y| y * y).sum();
        assert!((num / den).sqrt() <= 1e-6);
        checked += 1;
    }
    assert!(checked >= 10, "only {checked} usable pairs");
}

#[test]
fn residual_nonincreasing_up_to_all_anchors() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let ds = linear_world(&mut rng, 10, 2, 4);
    let q: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
    let residuals: Vec<f64> = (1..=10)
        .map(|k| convert_pooled_to_hidden(&q, &ds, &ConversionConfig::new(k)).unwrap().residual_norm)
        .collect();
    for w in residuals.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "{residuals:?}");
    }
    assert!(residuals[9] <= residuals.iter().copied().fold(f64::INFINITY, f64::min) + 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn residual_orthogonal_to_neighbors(seed in any::<u64>(), k in 1usize..=10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let neighbors = gaussian(&mut rng, (k, 8));
        let q: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let fit = fit_coefficients(&q, neighbors.view(), 1e-10).unwrap();
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let residual: Vec<f64> = (0..8)
            .map(|d| q[d] - (0..k).map(|i| fit.coefficients[i] * neighbors[[i, d]]).sum::<f64>())
            .collect();
        for row in neighbors.outer_iter() {
            let dot: f64 = row.iter().zip(&residual).map(|(a, b)| a * b).sum();
            let en = row.dot(&row).sqrt();
            prop_assert!(dot.abs() <= 1e-5 * qn * en);
        }
    }

    #[test]
    fn conversion_is_homogeneous(seed in any::<u64>(), scale in -4.0f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = linear_world(&mut rng, 30, 2, 5);
        let q: Vec<f64> = (0..5).map(|_| rng.sample(StandardNormal)).collect();
        let qs: Vec<f64> = q.iter().map(|v| v * scale).collect();
        let cfg = ConversionConfig::new(4);
        let base = convert_pooled_to_hidden(&q, &ds, &cfg).unwrap();
        // the neighbor set depends on the query's position, so compare the
        // coefficient map on a fixed neighbor set
        let neighbors = ds.pooled().select(Axis(0), &base.neighbor_indices);
        let f1 = fit_coefficients(&q, neighbors.view(), 1e-10).unwrap();
        let f2 = fit_coefficients(&qs, neighbors.view(), 1e-10).unwrap();
        for (a, b) in f1.coefficients.iter().zip(&f2.coefficients) {
            prop_assert!((a * scale - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        let hidden = ds.hidden().select(Axis(0), &base.neighbor_indices);
        let h1 = blendconv::combine_hidden(&f1.coefficients, hidden.view()).unwrap();
        let h2 = blendconv::combine_hidden(&f2.coefficients, hidden.view()).unwrap();
        for (a, b) in h1.iter().zip(h2.iter()) {
            prop_assert!((a * scale - b).abs() <= 1e-8 * (1.0 + b.abs()));
        }
    }
}

#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use blendconv::embedstore::SpaceMeta;
use blendconv::{write_embedding_file, EmbeddingDataset};
use ndarray::{Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random hidden tensor; pooled rows are a fixed random linear map of the
/// hidden slice at `token`.
pub fn linear_world(rng: &mut ChaCha8Rng, n: usize, t: usize, d: usize, token: usize) -> EmbeddingDataset {
    let hidden = Array3::from_shape_simple_fn((n, t, d), || rng.sample::<f64, _>(StandardNormal) as f32);
    let map = gaussian(rng, d, d);
    let pooled = hidden.index_axis(Axis(1), token).mapv(f64::from).dot(&map).mapv(|v| v as f32);
    let words = (0..n).map(|i| format!("w{i:04}")).collect();
    EmbeddingDataset::new(words, pooled, hidden, "a photo of a <WORD>").unwrap()
}

pub fn write_vectors(path: &Path, rows: &Array2<f64>) {
    let (n, d) = rows.dim();
    let tensor = rows.mapv(|v| v as f32).into_shape_with_order((n, 1, d)).unwrap();
    write_embedding_file(tensor.view(), &SpaceMeta::pooled(d, ""), path).unwrap();
}

pub fn blendconv<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_blendconv"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn full_sort_knn(query: &[f64], anchors: &Array2<f64>, k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = anchors
        .outer_iter()
        .enumerate()
        .map(|(i, row)| (row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum(), i))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Gaussian elimination with full pivoting.
pub fn solve_full_pivot(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    let mut cols: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let (mut pr, mut pc, mut best) = (k, k, 0.0);
        for (r, row) in a.iter().enumerate().skip(k) {
            for (c, v) in row.iter().enumerate().skip(k) {
                if v.abs() > best {
                    (best, pr, pc) = (v.abs(), r, c);
                }
            }
        }
        a.swap(k, pr);
        b.swap(k, pr);
        for row in a.iter_mut() {
            row.swap(k, pc);
        }
        cols.swap(k, pc);
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
    for (k, &c) in cols.iter().enumerate() {
        x[c] = y[k];
    }
    x
}

/// Minimum-norm least squares via the Gram system (`k <= D`) or
/// `N (N^T N)^-1 q` when there are more neighbors than dimensions.
pub fn normal_equations(q: &[f64], neighbors: &Array2<f64>) -> Vec<f64> {
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

/// Average ranks with ties sharing the mean position.
pub fn average_ranks(d: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap());
    let mut ranks = vec![0.0; d.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && d[order[j + 1]] == d[order[i]] {
            j += 1;
        }
        for &o in &order[i..=j] {
            ranks[o] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman over the union of the two `ell`-nearest sets, ranks taken over
/// all anchors.
pub fn brute_spearman(pooled: &[f64], hidden: &[f64], ell: usize) -> f64 {
    let nearest = |d: &[f64]| {
        let mut idx: Vec<usize> = (0..d.len()).collect();
        idx.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap().then(a.cmp(&b)));
        idx.truncate(ell);
        idx
    };
    let mut set = nearest(pooled);
    for i in nearest(hidden) {
        if !set.contains(&i) {
            set.push(i);
        }
    }
    if set.len() == 1 {
        return 1.0;
    }
    let (rp, rh) = (average_ranks(pooled), average_ranks(hidden));
    let x: Vec<f64> = set.iter().map(|&i| rp[i]).collect();
    let y: Vec<f64> = set.iter().map(|&i| rh[i]).collect();
    let m = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / m, y.iter().sum::<f64>() / m);
    let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    match (vx == 0.0, vy == 0.0) {
        (true, true) => 1.0,
        (false, false) => cov / (vx * vy).sqrt(),
        _ => 0.0,
    }
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

//! Seeded synthetic inputs shared by the benchmarks.

use blendconv::EmbeddingDataset;
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// `n` words with `t x d` hidden embeddings; pooled vectors are a random
/// linear map of the last token.
pub fn dataset(rng: &mut ChaCha8Rng, n: usize, t: usize, d: usize) -> EmbeddingDataset {
    let hidden = Array3::from_shape_simple_fn((n, t, d), || rng.sample::<f32, _>(StandardNormal));
    let map = gaussian(rng, d, d);
    let pooled = hidden
        .index_axis(Axis(1), t - 1)
        .mapv(f64::from)
        .dot(&map)
        .mapv(|v| v as f32);
    let words = (0..n).map(|i| format!("w{i}")).collect();
    EmbeddingDataset::new(words, pooled, hidden, "a photo of a <WORD>").expect("synthetic data is valid")
}

//! Conversion of pooled text embeddings into last-hidden-state embeddings by
//! nearest-neighbor regression, plus the evaluation stack around it:
//! interpolation, conversion error and neighborhood rank metrics, concept
//! presence and blending detection, and token-wise canonical correlation.

pub mod blend;
pub mod cca;
pub mod convert;
pub mod embedstore;
mod error;
pub mod evalmetrics;
pub mod geometry;

pub use blend::{
    classify_presence, count_blend_cases, fit_boundary, nonword_neighbors, ratio_table, BlendConfig,
    BlendCounts, BoundaryModel, GenerationRecord, NonwordConfig, NonwordNeighborRecord, RatioRow,
};
pub use cca::{max_canonical_correlation, tokenwise_cca, CcaOutcome, CcaResult};
pub use convert::{
    combine_hidden, convert_batch, convert_pooled_to_hidden, fit_coefficients, ConversionConfig,
    ConversionOutput, LeastSquaresFit,
};
pub use embedstore::{
    flatten_hidden, load_dataset, read_embedding_file, write_dataset, write_embedding_file,
    EmbeddingDataset, EmbeddingFile, FlatHiddenVector, Manifest, SpaceKind, SpaceMeta,
};
pub use error::{Error, Result};
pub use evalmetrics::{
    dimensionwise_error, evaluate, l2_error, rank_correlation, EvalReport, RankCorrConfig,
};
pub use geometry::{
    interpolate, interpolate_pair, knn, knn_batch, l2_distance, pairwise_percentile,
    InterpolationSpec, NeighborList,
};

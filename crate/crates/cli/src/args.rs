use std::ops::Range;
use std::path::PathBuf;

use blendconv::blend::{DEFAULT_N, DEFAULT_THRESHOLD};
use blendconv::cca::DEFAULT_REGULARIZATION;
use blendconv::convert::{DEFAULT_K, DEFAULT_RCOND};
use clap::{Args, Parser, Subcommand};

/// Pooled-to-hidden embedding conversion and its evaluation tools.
#[derive(Debug, Parser)]
#[command(name = "blendconv", version, propagate_version = true)]
pub struct Cli {
    /// Worker threads for batch computations (default: one per core).
    /// Affects speed only, never output bytes.
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u16).range(1..))]
    pub threads: Option<u16>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Interpolate word pairs in both spaces to build evaluation queries.
    Interpolate(InterpolateArgs),
    /// Estimate hidden-state embeddings for pooled query vectors.
    Convert(ConvertArgs),
    /// Score estimated hidden embeddings against ground truth.
    Eval(EvalArgs),
    /// Fit the presence threshold between matching and mismatching scores.
    FitBoundary(FitBoundaryArgs),
    /// Count blending cases per interpolation ratio from image scores.
    DetectBlend(DetectBlendArgs),
    /// Find the two nearest vocabulary words of each nonword embedding.
    NnWords(NnWordsArgs),
    /// Canonical correlation between the pooled space and each token slice.
    Cca(CcaArgs),
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["pairs", "sample"]))]
pub struct InterpolateArgs {
    /// Dataset directory containing manifest.json.
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,

    /// JSON array of {"a": word, "b": word, "r": ratio}.
    #[arg(long, value_name = "FILE")]
    pub pairs: Option<PathBuf>,

    /// Draw this many random pairs with ratios on the 0.1..0.9 grid.
    #[arg(long, value_name = "N", requires = "seed", value_parser = clap::value_parser!(u64).range(1..))]
    pub sample: Option<u64>,

    /// Seed for --sample.
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,

    /// Directory receiving queries.emb1, ground_truth.emb1 and pairs.json.
    #[arg(long, value_name = "DIR")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Dataset directory containing manifest.json.
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,

    /// Pooled query vectors (EMB1, one token per row).
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,

    /// Number of nearest anchors used per query.
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,

    /// Relative singular-value cutoff of the least-squares solve.
    #[arg(long, default_value_t = DEFAULT_RCOND)]
    pub rcond: f64,

    /// Estimated hidden embeddings (EMB1).
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,

    /// JSON report with neighbors and coefficients per query.
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory containing manifest.json.
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,

    /// Ground-truth pooled queries (EMB1).
    #[arg(long, value_name = "FILE")]
    pub queries: PathBuf,

    /// Ground-truth hidden embeddings (EMB1).
    #[arg(long, value_name = "FILE")]
    pub ground_truth: PathBuf,

    /// Estimated hidden embeddings (EMB1).
    #[arg(long, value_name = "FILE")]
    pub estimates: PathBuf,

    /// Neighborhood sizes for the rank correlation.
    #[arg(long, value_delimiter = ',', default_values_t = [2usize, 5])]
    pub ell: Vec<usize>,

    /// JSON report.
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,

    /// CSV of per-sample metrics.
    #[arg(long, value_name = "FILE")]
    pub per_sample: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitBoundaryArgs {
    /// Single-column CSV of scores for matching image-text pairs.
    #[arg(long, value_name = "FILE")]
    pub matching: PathBuf,

    /// Single-column CSV of scores for mismatching pairs.
    #[arg(long, value_name = "FILE")]
    pub mismatching: PathBuf,

    /// JSON with the fitted Gaussians and threshold.
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct DetectBlendArgs {
    /// Scores CSV: pair_id,concept_a,concept_b,ratio,image_index,score_a,score_b.
    #[arg(long, value_name = "FILE")]
    pub scores: PathBuf,

    /// A concept is present in an image when its score is at least this.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,

    /// Images that must show a concept for it to count as detected.
    #[arg(long, default_value_t = DEFAULT_N)]
    pub n: usize,

    /// Accept pairs with differing image counts.
    #[arg(long)]
    pub allow_ragged: bool,

    /// Ratio table CSV.
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,

    /// Per-pair detection CSV.
    #[arg(long, value_name = "FILE")]
    pub records: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NnWordsArgs {
    /// Dataset directory containing manifest.json.
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,

    /// Nonword pooled embeddings (EMB1).
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,

    /// Nonword identifiers, one per line (default: nonword_<row>).
    #[arg(long, value_name = "FILE")]
    pub ids: Option<PathBuf>,

    /// Restrict the vocabulary to these dataset words, one per line.
    #[arg(long, value_name = "FILE")]
    pub vocab: Option<PathBuf>,

    /// Percentile of vocabulary pairwise distances used as the closeness cutoff.
    #[arg(long, default_value_t = 1.0)]
    pub percentile: f64,

    /// Lower bound of the kept pseudo ratio.
    #[arg(long, default_value_t = 0.4)]
    pub ratio_min: f64,

    /// Upper bound of the kept pseudo ratio.
    #[arg(long, default_value_t = 0.6)]
    pub ratio_max: f64,

    /// Per-nonword CSV.
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct CcaArgs {
    /// Dataset directory containing manifest.json.
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,

    /// Token positions as START..END (END exclusive) or a single index
    /// (default: every token).
    #[arg(long, value_name = "RANGE", value_parser = parse_token_range)]
    pub tokens: Option<Range<usize>>,

    /// Ridge added to each covariance, relative to its mean variance.
    #[arg(long, default_value_t = DEFAULT_REGULARIZATION)]
    pub regularization: f64,

    /// CSV with columns token,max_correlation.
    #[arg(long, value_name = "FILE")]
    pub output: PathBuf,
}

fn parse_token_range(s: &str) -> Result<Range<usize>, String> {
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let range = match s.split_once("..") {
        Some((a, b)) => parse(a)?..parse(b)?,
        None => {
            let t = parse(s)?;
            t..t + 1
        }
    };
    if range.start >= range.end {
        return Err(format!("{s:?} is an empty range"));
    }
    Ok(range)
}

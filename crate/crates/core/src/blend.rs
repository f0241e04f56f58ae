//! Concept presence from image-text scores, blended/mixed concept detection
//! over groups of generated images, and the nonword nearest-word protocol.

use std::collections::HashMap;
use std::io::{Read, Write};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{check_len, Error, Result};
use crate::geometry::{pairwise_percentile, sq_dist};

pub const DEFAULT_THRESHOLD: f64 = 0.15;
pub const DEFAULT_N: usize = 2;

/// Presence test: a score equal to the threshold counts as present.
#[inline]
pub fn classify_presence(score: f64, threshold: f64) -> bool {
    score >= threshold
}

/// Two class-conditional Gaussians and the equal-prior decision threshold
/// between them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundaryModel {
    pub mu_match: f64,
    pub sigma_match: f64,
    pub mu_mismatch: f64,
    pub sigma_mismatch: f64,
    pub threshold: f64,
    /// No root of the log-density difference lay between the means; the
    /// threshold is the root with the best balanced accuracy instead.
    pub fallback: bool,
}

fn mean_std(xs: &[f64], which: &str) -> Result<(f64, f64)> {
    if xs.len() < 2 {
        return Err(Error::Invalid(format!(
            "{which} scores need at least 2 values, got {}",
            xs.len()
        )));
    }
    if let Some(i) = xs.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("{which} scores"),
            location: format!("index {i}"),
        });
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var <= 0.0 {
        return Err(Error::Degenerate(format!("{which} scores have zero variance")));
    }
    Ok((mean, var.sqrt()))
}

/// Real roots of `log N(x; mu_a, s_a) = log N(x; mu_b, s_b)`, ascending.
pub fn equal_density_points(mu_a: f64, s_a: f64, mu_b: f64, s_b: f64) -> Vec<f64> {
    let (va, vb) = (s_a * s_a, s_b * s_b);
    // (x-mu_a)^2/(2va) - (x-mu_b)^2/(2vb) + ln(s_a/s_b) = 0
    let a = 0.5 / va - 0.5 / vb;
    let b = mu_b / vb - mu_a / va;
    let c = 0.5 * mu_a * mu_a / va - 0.5 * mu_b * mu_b / vb + (s_a / s_b).ln();

    if s_a == s_b {
        return vec![0.5 * (mu_a + mu_b)];
    }
    if a.abs() <= 1e-12 * (0.5 / va + 0.5 / vb) {
        return if b == 0.0 { vec![] } else { vec![-c / b] };
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return vec![];
    }
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let mut roots = if q == 0.0 {
        vec![0.0]
    } else {
        vec![q / a, c / q]
    };
    roots.sort_unstable_by(f64::total_cmp);
    roots.dedup();
    roots
}

impl BoundaryModel {
    /// Builds the model from known class parameters. When no boundary lies
    /// between the means, the root with the best analytic balanced accuracy
    /// is used.
    pub fn from_params(mu_match: f64, sigma_match: f64, mu_mismatch: f64, sigma_mismatch: f64) -> Result<Self> {
        let match_dist = Normal::new(mu_match, sigma_match)
            .map_err(|e| Error::Degenerate(format!("matching class: {e}")))?;
        let mismatch_dist = Normal::new(mu_mismatch, sigma_mismatch)
            .map_err(|e| Error::Degenerate(format!("mismatching class: {e}")))?;
        Self::solve(mu_match, sigma_match, mu_mismatch, sigma_mismatch, |t| {
            0.5 * ((1.0 - match_dist.cdf(t)) + mismatch_dist.cdf(t))
        })
    }

    fn solve(
        mu_match: f64,
        sigma_match: f64,
        mu_mismatch: f64,
        sigma_mismatch: f64,
        balanced_accuracy: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        for (name, s) in [("matching", sigma_match), ("mismatching", sigma_mismatch)] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Degenerate(format!("{name} class has sigma {s}")));
            }
        }
        if mu_match == mu_mismatch {
            return Err(Error::Degenerate("class means are identical".into()));
        }
        let roots = equal_density_points(mu_mismatch, sigma_mismatch, mu_match, sigma_match);
        let (lo, hi) = if mu_mismatch < mu_match {
            (mu_mismatch, mu_match)
        } else {
            (mu_match, mu_mismatch)
        };
        let mid = 0.5 * (lo + hi);
        let between = roots
            .iter()
            .copied()
            .filter(|r| (lo..=hi).contains(r))
            .min_by(|a, b| (a - mid).abs().total_cmp(&(b - mid).abs()));

        let (threshold, fallback) = match between {
            Some(t) => (t, false),
            None => {
                let best = roots
                    .iter()
                    .copied()
                    .max_by(|a, b| balanced_accuracy(*a).total_cmp(&balanced_accuracy(*b)))
                    .unwrap_or(mid);
                (best, true)
            }
        };
        Ok(BoundaryModel {
            mu_match,
            sigma_match,
            mu_mismatch,
            sigma_mismatch,
            threshold,
            fallback,
        })
    }

    pub fn classify(&self, score: f64) -> bool {
        classify_presence(score, self.threshold)
    }
}

/// Fits one Gaussian per class (sample mean, unbiased standard deviation)
/// and places the threshold where the class densities are equal.
pub fn fit_boundary(matching: &[f64], mismatching: &[f64]) -> Result<BoundaryModel> {
    let (mu_m, s_m) = mean_std(matching, "matching")?;
    let (mu_x, s_x) = mean_std(mismatching, "mismatching")?;
    BoundaryModel::solve(mu_m, s_m, mu_x, s_x, |t| {
        let tp = matching.iter().filter(|&&s| classify_presence(s, t)).count();
        let tn = mismatching.iter().filter(|&&s| !classify_presence(s, t)).count();
        0.5 * (tp as f64 / matching.len() as f64 + tn as f64 / mismatching.len() as f64)
    })
}

/// Scores of the N images generated for one interpolated embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRecord {
    pub pair_id: String,
    pub concept_a: String,
    pub concept_b: String,
    pub ratio: f64,
    /// `(score_a, score_b)` per image.
    pub scores: Vec<(f64, f64)>,
}

impl GenerationRecord {
    pub fn image_count(&self) -> usize {
        self.scores.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.is_empty() {
            return Err(Error::Invalid(format!("pair {:?} has no images", self.pair_id)));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::out_of_range(
                "interpolation ratio",
                format!("pair {:?} has ratio {}", self.pair_id, self.ratio),
            ));
        }
        if let Some(i) = self
            .scores
            .iter()
            .position(|(a, b)| !a.is_finite() || !b.is_finite())
        {
            return Err(Error::NonFinite {
                what: format!("scores of pair {:?}", self.pair_id),
                location: format!("image {i}"),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlendConfig {
    /// Minimum number of images that must show a concept (or both).
    pub n: usize,
    pub threshold: f64,
}

impl Default for BlendConfig {
    fn default() -> Self {
        BlendConfig {
            n: DEFAULT_N,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BlendCounts {
    pub concept_a_detected: bool,
    pub concept_b_detected: bool,
    /// Both concepts in the same image, in at least `n` images.
    pub bcd: bool,
    /// Each concept in at least `n` images, not necessarily the same ones.
    pub mcd: bool,
}

pub fn count_blend_cases(record: &GenerationRecord, cfg: &BlendConfig) -> Result<BlendCounts> {
    record.validate()?;
    if cfg.n == 0 || cfg.n > record.image_count() {
        return Err(Error::out_of_range(
            "n",
            format!(
                "{} must be in 1..={} (images of pair {:?})",
                cfg.n,
                record.image_count(),
                record.pair_id
            ),
        ));
    }
    let th = cfg.threshold;
    let (mut a, mut b, mut both) = (0, 0, 0);
    for &(sa, sb) in &record.scores {
        let (pa, pb) = (classify_presence(sa, th), classify_presence(sb, th));
        a += pa as usize;
        b += pb as usize;
        both += (pa && pb) as usize;
    }
    let concept_a_detected = a >= cfg.n;
    let concept_b_detected = b >= cfg.n;
    Ok(BlendCounts {
        concept_a_detected,
        concept_b_detected,
        bcd: both >= cfg.n,
        mcd: concept_a_detected && concept_b_detected,
    })
}

/// One column of the ratio table. Fractions are `None` when `support` is 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioRow {
    /// Grid ratio of the bucket; `None` for the overall row.
    pub ratio: Option<f64>,
    pub support: usize,
    pub concept_a: Option<f64>,
    pub concept_b: Option<f64>,
    pub bcd: Option<f64>,
    pub mcd: Option<f64>,
}

/// Index of the nearest multiple of 0.1.
pub fn ratio_bucket(r: f64) -> usize {
    (r * 10.0).round() as usize
}

#[derive(Default, Clone, Copy)]
struct Tally {
    support: usize,
    a: usize,
    b: usize,
    bcd: usize,
    mcd: usize,
}

impl Tally {
    fn add(&mut self, c: &BlendCounts) {
        self.support += 1;
        self.a += c.concept_a_detected as usize;
        self.b += c.concept_b_detected as usize;
        self.bcd += c.bcd as usize;
        self.mcd += c.mcd as usize;
    }

    fn row(&self, ratio: Option<f64>) -> RatioRow {
        let frac = |x: usize| (self.support > 0).then(|| x as f64 / self.support as f64);
        RatioRow {
            ratio,
            support: self.support,
            concept_a: frac(self.a),
            concept_b: frac(self.b),
            bcd: frac(self.bcd),
            mcd: frac(self.mcd),
        }
    }
}

/// Per-ratio and overall detection fractions. Rows for 0.1..=0.9 are always
/// present; 0.0 and 1.0 appear only when some record falls in them.
pub fn ratio_table(records: &[GenerationRecord], cfg: &BlendConfig) -> Result<Vec<RatioRow>> {
    if records.is_empty() {
        return Err(Error::Invalid("no generation records".into()));
    }
    let mut buckets = [Tally::default(); 11];
    let mut overall = Tally::default();
    for rec in records {
        let c = count_blend_cases(rec, cfg)?;
        buckets[ratio_bucket(rec.ratio)].add(&c);
        overall.add(&c);
    }
    let mut rows: Vec<RatioRow> = buckets
        .iter()
        .enumerate()
        .filter(|(i, t)| (1..=9).contains(i) || t.support > 0)
        .map(|(i, t)| t.row(Some(i as f64 / 10.0)))
        .collect();
    rows.push(overall.row(None));
    Ok(rows)
}

pub const TABLE_HEADER: [&str; 6] = ["ratio", "concept_a", "concept_b", "bcd", "mcd", "support"];

pub fn write_ratio_table<W: Write>(rows: &[RatioRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Invalid(format!("writing table: {e}"));
    w.write_record(TABLE_HEADER).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let ratio = r
            .ratio
            .map(|x| format!("{x:.1}"))
            .unwrap_or_else(|| "overall".to_string());
        w.write_record([
            ratio,
            opt(r.concept_a),
            opt(r.concept_b),
            opt(r.bcd),
            opt(r.mcd),
            r.support.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<table>", e))
}

#[derive(Debug, Deserialize)]
struct ScoreRow {
    pair_id: String,
    concept_a: String,
    concept_b: String,
    ratio: f64,
    image_index: usize,
    score_a: f64,
    score_b: f64,
}

/// Parses a scores CSV (`pair_id,concept_a,concept_b,ratio,image_index,
/// score_a,score_b`), grouping rows by `pair_id` in order of first
/// appearance. Images within a pair are ordered by `image_index`.
pub fn read_scores<R: Read>(input: R, source: &str, allow_ragged: bool) -> Result<Vec<GenerationRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let fmt = |msg: String| Error::format(source, msg);

    let headers = reader.headers().map_err(|e| fmt(e.to_string()))?.clone();
    let expected = ["pair_id", "concept_a", "concept_b", "ratio", "image_index", "score_a", "score_b"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(fmt(format!(
            "expected header {:?}, found {:?}",
            expected.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (GenerationRecord, Vec<usize>)> = HashMap::new();
    for (line, row) in reader.deserialize::<ScoreRow>().enumerate() {
        let row = row.map_err(|e| fmt(e.to_string()))?;
        let entry = groups.entry(row.pair_id.clone()).or_insert_with(|| {
            order.push(row.pair_id.clone());
            (
                GenerationRecord {
                    pair_id: row.pair_id.clone(),
                    concept_a: row.concept_a.clone(),
                    concept_b: row.concept_b.clone(),
                    ratio: row.ratio,
                    scores: Vec::new(),
                },
                Vec::new(),
            )
        });
        let (rec, images) = entry;
        if rec.concept_a != row.concept_a || rec.concept_b != row.concept_b || rec.ratio != row.ratio {
            return Err(fmt(format!(
                "data row {}: pair {:?} changes its concepts or ratio",
                line + 1,
                row.pair_id
            )));
        }
        if images.contains(&row.image_index) {
            return Err(fmt(format!(
                "data row {}: pair {:?} repeats image_index {}",
                line + 1,
                row.pair_id,
                row.image_index
            )));
        }
        images.push(row.image_index);
        rec.scores.push((row.score_a, row.score_b));
    }

    let mut records = Vec::with_capacity(order.len());
    for id in order {
        let (mut rec, images) = groups.remove(&id).expect("grouped above");
        let mut paired: Vec<(usize, (f64, f64))> = images.into_iter().zip(rec.scores).collect();
        paired.sort_unstable_by_key(|(i, _)| *i);
        rec.scores = paired.into_iter().map(|(_, s)| s).collect();
        rec.validate()?;
        records.push(rec);
    }
    if records.is_empty() {
        return Err(fmt("no score rows".into()));
    }
    if !allow_ragged {
        let n = records[0].image_count();
        if let Some(r) = records.iter().find(|r| r.image_count() != n) {
            return Err(fmt(format!(
                "pair {:?} has {} images but {:?} has {n}; pass --allow-ragged to accept",
                r.pair_id,
                r.image_count(),
                records[0].pair_id
            )));
        }
    }
    Ok(records)
}

/// Reads a single-column list of scores; a non-numeric first line is taken
/// as a header.
pub fn read_score_column<R: Read>(input: R, source: &str) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(source, e.to_string()))?;
        if rec.len() != 1 {
            return Err(Error::format(
                source,
                format!("line {}: expected one column, found {}", i + 1, rec.len()),
            ));
        }
        match rec[0].parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if i == 0 => continue,
            Err(_) => {
                return Err(Error::format(
                    source,
                    format!("line {}: {:?} is not a number", i + 1, &rec[0]),
                ))
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NonwordConfig {
    /// Percentile of vocabulary pairwise distances below which a candidate
    /// is too close to the first neighbor to serve as the second.
    pub closeness_percentile: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
}

impl Default for NonwordConfig {
    fn default() -> Self {
        NonwordConfig {
            closeness_percentile: 1.0,
            ratio_min: 0.4,
            ratio_max: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NonwordNeighborRecord {
    pub nonword_id: String,
    pub first_nn: String,
    pub first_index: usize,
    pub d1: f64,
    pub second_nn: Option<String>,
    pub second_index: Option<usize>,
    pub d2: Option<f64>,
    /// `d1 / (d1 + d2)`; 0.5 means equidistant.
    pub pseudo_ratio: f64,
    /// `d1 / d2`, kept for comparison with the plain distance ratio.
    pub distance_ratio: Option<f64>,
    pub kept: bool,
    /// Every candidate was too close to the first neighbor.
    pub no_eligible_second: bool,
}

/// Top-two nearest vocabulary words for each nonword, skipping second
/// candidates that lie closer to the first neighbor than the closeness
/// threshold.
pub fn nonword_neighbors<Q, A>(
    nonword_ids: &[String],
    nonword_pooled: ArrayView2<'_, Q>,
    vocab_words: &[String],
    vocab_pooled: ArrayView2<'_, A>,
    cfg: &NonwordConfig,
) -> Result<Vec<NonwordNeighborRecord>>
where
    Q: Copy + Into<f64>,
    A: Copy + Into<f64> + Sync,
{
    check_len("nonword id count", nonword_pooled.nrows(), nonword_ids.len())?;
    check_len("vocabulary word count", vocab_pooled.nrows(), vocab_words.len())?;
    check_len("nonword dimension", vocab_pooled.ncols(), nonword_pooled.ncols())?;
    if vocab_words.len() < 2 {
        return Err(Error::Invalid("vocabulary needs at least 2 words".into()));
    }
    if !(0.0..=1.0).contains(&cfg.ratio_min)
        || !(0.0..=1.0).contains(&cfg.ratio_max)
        || cfg.ratio_min > cfg.ratio_max
    {
        return Err(Error::out_of_range(
            "ratio bounds",
            format!("need 0 <= {} <= {} <= 1", cfg.ratio_min, cfg.ratio_max),
        ));
    }
    let tau = pairwise_percentile(vocab_pooled, cfg.closeness_percentile)?;

    let vocab: Vec<Vec<f64>> = vocab_pooled
        .outer_iter()
        .map(|r| r.iter().map(|&v| v.into()).collect())
        .collect();

    let nearest = |dist: &[f64], allowed: &dyn Fn(usize) -> bool| -> Option<usize> {
        (0..dist.len())
            .filter(|&j| allowed(j))
            .min_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)))
    };

    let mut out = Vec::with_capacity(nonword_ids.len());
    for (id, row) in nonword_ids.iter().zip(nonword_pooled.outer_iter()) {
        let q: Vec<f64> = row.iter().map(|&v| v.into()).collect();
        let dist: Vec<f64> = vocab.iter().map(|v| sq_dist(&q, v).sqrt()).collect();
        let first = nearest(&dist, &|_| true).expect("vocabulary is non-empty");
        let second = nearest(&dist, &|j| {
            j != first && sq_dist(&vocab[j], &vocab[first]).sqrt() >= tau
        });
        let d1 = dist[first];
        let rec = match second {
            Some(s) => {
                let d2 = dist[s];
                let pseudo_ratio = if d1 + d2 > 0.0 { d1 / (d1 + d2) } else { 0.0 };
                NonwordNeighborRecord {
                    nonword_id: id.clone(),
                    first_nn: vocab_words[first].clone(),
                    first_index: first,
                    d1,
                    second_nn: Some(vocab_words[s].clone()),
                    second_index: Some(s),
                    d2: Some(d2),
                    pseudo_ratio,
                    distance_ratio: (d2 > 0.0).then(|| d1 / d2),
                    kept: (cfg.ratio_min..=cfg.ratio_max).contains(&pseudo_ratio),
                    no_eligible_second: false,
                }
            }
            None => NonwordNeighborRecord {
                nonword_id: id.clone(),
                first_nn: vocab_words[first].clone(),
                first_index: first,
                d1,
                second_nn: None,
                second_index: None,
                d2: None,
                pseudo_ratio: 0.0,
                distance_ratio: None,
                kept: false,
                no_eligible_second: true,
            },
        };
        out.push(rec);
    }
    Ok(out)
}

use std::fs::File;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use blendconv::blend::{read_score_column, read_scores, write_ratio_table};
use blendconv::embedstore::{write_embedding, SpaceMeta};
use blendconv::evalmetrics::SampleMetrics;
use blendconv::geometry::{read_pairs_file, resolve_pairs, PairEntry};
use blendconv::{
    convert_batch, count_blend_cases, evaluate, fit_boundary, interpolate_pair, load_dataset,
    nonword_neighbors, ratio_table, read_embedding_file, tokenwise_cca, BlendConfig, BoundaryModel,
    ConversionConfig, EmbeddingFile, Error, InterpolationSpec, NonwordConfig,
};
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::args::{CcaArgs, ConvertArgs, DetectBlendArgs, EvalArgs, FitBoundaryArgs, InterpolateArgs, NnWordsArgs};
use crate::output::{sig6, Provenance, Staged, CCA_NOTE, LSTSQ_NOTE, PRESENCE_NOTE, PSEUDO_RATIO_NOTE, SPEARMAN_NOTE};

pub const QUERIES_FILE: &str = "queries.emb1";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.emb1";
pub const PAIRS_FILE: &str = "pairs.json";

/// Reads an EMB1 file that must hold one vector per row.
fn read_vectors(path: &Path) -> Result<Array2<f32>> {
    let file = read_embedding_file(path)?;
    if file.token_count != 1 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("expected one token per row, found {}", file.token_count),
        }
        .into());
    }
    Ok(file.into_matrix())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn write_tensor(w: &mut dyn Write, data: &Array3<f32>, meta: &SpaceMeta) -> Result<()> {
    write_embedding(data.view(), meta, w)?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn sample_pairs(words: &[String], count: u64, seed: u64) -> Result<Vec<PairEntry>> {
    let n = words.len();
    if n < 2 {
        bail!("sampling pairs needs at least 2 words, dataset has {n}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let a = rng.random_range(0..n);
            let mut b = rng.random_range(0..n - 1);
            if b >= a {
                b += 1;
            }
            let r = f64::from(rng.random_range(1..=9u8)) / 10.0;
            PairEntry {
                a: words[a].clone(),
                b: words[b].clone(),
                r,
            }
        })
        .collect())
}

#[derive(Serialize)]
struct PairsReport<'a> {
    provenance: Provenance,
    pairs: &'a [PairEntry],
}

pub fn interpolate(args: &InterpolateArgs) -> Result<String> {
    let ds = load_dataset(&args.dataset)?;
    let mut prov = Provenance::new("interpolate").dataset(&args.dataset)?;
    let entries = match (&args.pairs, args.sample, args.seed) {
        (Some(path), _, _) => {
            prov = prov.input("pairs", path)?;
            read_pairs_file(path)?
        }
        (None, Some(count), Some(seed)) => {
            prov = prov.flag("sample", count).flag("seed", seed);
            sample_pairs(ds.words(), count, seed)?
        }
        _ => bail!("either --pairs or --sample with --seed is required"),
    };
    if entries.is_empty() {
        bail!("no pairs to interpolate");
    }
    let specs: Vec<InterpolationSpec> = resolve_pairs(&entries, &ds)?;

    let (t, d) = (ds.token_count(), ds.hidden_dim());
    let mut queries = Array3::<f32>::zeros((specs.len(), 1, ds.dim()));
    let mut truth = Array3::<f32>::zeros((specs.len(), t, d));
    for (i, spec) in specs.iter().enumerate() {
        let pair = interpolate_pair(&ds, spec)?;
        for (dst, &v) in queries.index_axis_mut(Axis(0), i).iter_mut().zip(&pair.pooled) {
            *dst = v as f32;
        }
        truth.index_axis_mut(Axis(0), i).assign(&pair.hidden.mapv(|v| v as f32));
    }

    let template = ds.prompt_template().to_string();
    let mut staged = Staged::default();
    std::fs::create_dir_all(&args.output_dir).map_err(|e| Error::Io {
        path: args.output_dir.clone(),
        source: e,
    })?;
    staged.add(&args.output_dir.join(QUERIES_FILE), |w| {
        write_tensor(w, &queries, &SpaceMeta::pooled(ds.dim(), template.clone()))
    })?;
    staged.add(&args.output_dir.join(GROUND_TRUTH_FILE), |w| {
        write_tensor(w, &truth, &SpaceMeta::hidden(t, d, template.clone()))
    })?;
    staged.add_json(
        &args.output_dir.join(PAIRS_FILE),
        &PairsReport {
            provenance: prov,
            pairs: &entries,
        },
    )?;
    staged.commit()?;
    Ok(format!(
        "interpolated {} pairs into {}",
        entries.len(),
        args.output_dir.display()
    ))
}

#[derive(Serialize)]
struct QueryReport<'a> {
    query: usize,
    neighbors: Vec<&'a str>,
    neighbor_indices: &'a [usize],
    distances: &'a [f64],
    coefficients: &'a [f64],
    residual_norm: f64,
    degenerate: bool,
}

#[derive(Serialize)]
struct ConvertReport<'a> {
    provenance: Provenance,
    queries: Vec<QueryReport<'a>>,
}

pub fn convert(args: &ConvertArgs) -> Result<String> {
    let cfg = ConversionConfig {
        k: args.k,
        solver_rcond: args.rcond,
    };
    let ds = load_dataset(&args.dataset)?;
    cfg.validate(ds.len())?;
    let queries = read_vectors(&args.input)?;
    if queries.nrows() == 0 {
        bail!("{} holds no queries", args.input.display());
    }
    let outputs = convert_batch(queries.view(), &ds, &cfg)?;

    let (t, d) = (ds.token_count(), ds.hidden_dim());
    let mut est = Array3::<f32>::zeros((outputs.len(), t, d));
    for (i, out) in outputs.iter().enumerate() {
        est.index_axis_mut(Axis(0), i)
            .assign(&out.estimated_hidden.mapv(|v| v as f32));
    }

    let mut staged = Staged::default();
    staged.add(&args.output, |w| {
        write_tensor(w, &est, &SpaceMeta::hidden(t, d, ds.prompt_template()))
    })?;
    if let Some(path) = &args.report {
        let prov = Provenance::new("convert")
            .flag("k", cfg.k)
            .flag("rcond", cfg.solver_rcond)
            .dataset(&args.dataset)?
            .input("queries", &args.input)?
            .note(LSTSQ_NOTE);
        let report = ConvertReport {
            provenance: prov,
            queries: outputs
                .iter()
                .enumerate()
                .map(|(i, o)| QueryReport {
                    query: i,
                    neighbors: o.neighbor_indices.iter().map(|&j| ds.words()[j].as_str()).collect(),
                    neighbor_indices: &o.neighbor_indices,
                    distances: &o.neighbor_distances,
                    coefficients: &o.coefficients,
                    residual_norm: o.residual_norm,
                    degenerate: o.degenerate,
                })
                .collect(),
        };
        staged.add_json(path, &report)?;
    }
    staged.commit()?;

    let mean_residual = outputs.iter().map(|o| o.residual_norm).sum::<f64>() / outputs.len() as f64;
    let degenerate = outputs.iter().filter(|o| o.degenerate).count();
    let mut line = format!(
        "converted {} queries with k={}; mean residual {}",
        outputs.len(),
        cfg.k,
        sig6(mean_residual)
    );
    if degenerate > 0 {
        line.push_str(&format!("; {degenerate} degenerate"));
    }
    Ok(line)
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    provenance: Provenance,
    #[serde(flatten)]
    report: &'a blendconv::EvalReport,
}

pub fn eval(args: &EvalArgs) -> Result<String> {
    if args.ell.is_empty() {
        bail!("--ell needs at least one value");
    }
    let ds = load_dataset(&args.dataset)?;
    for &ell in &args.ell {
        blendconv::RankCorrConfig { ell }.validate(ds.len())?;
    }
    let queries = read_vectors(&args.queries)?;
    let truth = read_embedding_file(&args.ground_truth)?;
    let est: EmbeddingFile = read_embedding_file(&args.estimates)?;
    if truth.rows() == 0 {
        bail!("{} holds no samples", args.ground_truth.display());
    }
    let report = evaluate(&ds, queries.view(), truth.data.view(), est.data.view(), &args.ell)?;

    let ells = args.ell.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",");
    let prov = Provenance::new("eval")
        .flag("ell", &ells)
        .dataset(&args.dataset)?
        .input("queries", &args.queries)?
        .input("ground_truth", &args.ground_truth)?
        .input("estimates", &args.estimates)?
        .note(SPEARMAN_NOTE);

    let mut staged = Staged::default();
    if let Some(path) = &args.per_sample {
        staged.add(path, |w| {
            prov.write_comments(w)?;
            write_samples(w, &args.ell, &report.per_sample)
        })?;
    }
    staged.add_json(
        &args.output,
        &EvalOutput {
            provenance: prov.clone(),
            report: &report,
        },
    )?;
    staged.commit()?;

    let ranks: Vec<String> = report
        .rank_corr
        .iter()
        .map(|(ell, r)| format!("rank_corr@{ell} {}", sig6(*r)))
        .collect();
    Ok(format!(
        "l2_error {}; {} over {} samples",
        sig6(report.l2_error),
        ranks.join(", "),
        report.samples
    ))
}

fn write_samples(w: &mut dyn Write, ells: &[usize], samples: &[SampleMetrics]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["sample".to_string(), "l2_error".to_string()];
    header.extend(ells.iter().map(|e| format!("rank_corr_{e}")));
    out.write_record(&header)?;
    for (i, s) in samples.iter().enumerate() {
        let mut row = vec![i.to_string(), s.l2_error.to_string()];
        row.extend(s.rank_corr.iter().map(|r| r.to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct BoundaryOutput {
    provenance: Provenance,
    #[serde(flatten)]
    model: BoundaryModel,
    matching_count: usize,
    mismatching_count: usize,
}

fn read_column(path: &Path) -> Result<Vec<f64>> {
    let file = File::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(read_score_column(file, &path.display().to_string())?)
}

pub fn fit_boundary_cmd(args: &FitBoundaryArgs) -> Result<String> {
    let matching = read_column(&args.matching)?;
    let mismatching = read_column(&args.mismatching)?;
    let model = fit_boundary(&matching, &mismatching)?;
    let prov = Provenance::new("fit-boundary")
        .input("matching", &args.matching)?
        .input("mismatching", &args.mismatching)?
        .note("Gaussian class fits with n-1 standard deviation, equal priors");
    let mut staged = Staged::default();
    staged.add_json(
        &args.output,
        &BoundaryOutput {
            provenance: prov,
            model,
            matching_count: matching.len(),
            mismatching_count: mismatching.len(),
        },
    )?;
    staged.commit()?;
    let mut line = format!(
        "threshold {} (matching mean {}, mismatching mean {})",
        sig6(model.threshold),
        sig6(model.mu_match),
        sig6(model.mu_mismatch)
    );
    if model.fallback {
        line.push_str("; no density crossing between the means, used best balanced accuracy");
    }
    Ok(line)
}

pub fn detect_blend(args: &DetectBlendArgs) -> Result<String> {
    if !args.threshold.is_finite() {
        bail!("--threshold must be finite, got {}", args.threshold);
    }
    if args.n == 0 {
        bail!("--n must be at least 1");
    }
    let cfg = BlendConfig {
        n: args.n,
        threshold: args.threshold,
    };
    let file = File::open(&args.scores).map_err(|e| Error::Io {
        path: args.scores.clone(),
        source: e,
    })?;
    let records = read_scores(file, &args.scores.display().to_string(), args.allow_ragged)?;
    if records.is_empty() {
        bail!("{} holds no score rows", args.scores.display());
    }
    let rows = ratio_table(&records, &cfg)?;
    let counts = records
        .iter()
        .map(|r| count_blend_cases(r, &cfg))
        .collect::<blendconv::Result<Vec<_>>>()?;

    let prov = Provenance::new("detect-blend")
        .flag("threshold", cfg.threshold)
        .flag("n", cfg.n)
        .flag("allow_ragged", args.allow_ragged)
        .input("scores", &args.scores)?
        .note(PRESENCE_NOTE);

    let mut staged = Staged::default();
    staged.add(&args.output, |w| {
        prov.write_comments(w)?;
        write_ratio_table(&rows, w)?;
        Ok(())
    })?;
    if let Some(path) = &args.records {
        staged.add(path, |w| {
            prov.write_comments(w)?;
            let mut out = csv::Writer::from_writer(w);
            out.write_record([
                "pair_id",
                "concept_a",
                "concept_b",
                "ratio",
                "images",
                "concept_a_detected",
                "concept_b_detected",
                "bcd",
                "mcd",
            ])?;
            for (r, c) in records.iter().zip(&counts) {
                out.write_record([
                    r.pair_id.clone(),
                    r.concept_a.clone(),
                    r.concept_b.clone(),
                    r.ratio.to_string(),
                    r.image_count().to_string(),
                    c.concept_a_detected.to_string(),
                    c.concept_b_detected.to_string(),
                    c.bcd.to_string(),
                    c.mcd.to_string(),
                ])?;
            }
            out.flush()?;
            Ok(())
        })?;
    }
    staged.commit()?;

    let overall = rows.last().expect("table ends with the overall row");
    Ok(format!(
        "{} pairs; overall bcd {}, mcd {}",
        overall.support,
        sig6(overall.bcd.unwrap_or(0.0)),
        sig6(overall.mcd.unwrap_or(0.0))
    ))
}

pub fn nn_words(args: &NnWordsArgs) -> Result<String> {
    let cfg = NonwordConfig {
        closeness_percentile: args.percentile,
        ratio_min: args.ratio_min,
        ratio_max: args.ratio_max,
    };
    if !(0.0..=100.0).contains(&cfg.closeness_percentile) {
        bail!("--percentile must be in [0, 100], got {}", cfg.closeness_percentile);
    }
    if !(0.0 <= cfg.ratio_min && cfg.ratio_min <= cfg.ratio_max && cfg.ratio_max <= 1.0) {
        bail!(
            "ratio bounds must satisfy 0 <= ratio-min <= ratio-max <= 1, got {} and {}",
            cfg.ratio_min,
            cfg.ratio_max
        );
    }
    let ds = load_dataset(&args.dataset)?;
    let nonwords = read_vectors(&args.input)?;
    let ids = match &args.ids {
        Some(path) => read_lines(path)?,
        None => (0..nonwords.nrows()).map(|i| format!("nonword_{i}")).collect(),
    };
    if ids.len() != nonwords.nrows() {
        return Err(Error::Alignment {
            what: "nonword ids".into(),
            expected: nonwords.nrows(),
            found: ids.len(),
        }
        .into());
    }
    let (vocab_words, vocab_pooled) = match &args.vocab {
        Some(path) => {
            let words = read_lines(path)?;
            let idx = words
                .iter()
                .map(|w| ds.index_of(w).ok_or_else(|| Error::UnknownWord(w.clone())))
                .collect::<blendconv::Result<Vec<_>>>()?;
            (words, ds.pooled().select(Axis(0), &idx))
        }
        None => (ds.words().to_vec(), ds.pooled().to_owned()),
    };
    let records = nonword_neighbors(&ids, nonwords.view(), &vocab_words, vocab_pooled.view(), &cfg)?;

    let mut prov = Provenance::new("nn-words")
        .flag("percentile", cfg.closeness_percentile)
        .flag("ratio_min", cfg.ratio_min)
        .flag("ratio_max", cfg.ratio_max)
        .dataset(&args.dataset)?
        .input("nonwords", &args.input)?
        .note(PSEUDO_RATIO_NOTE)
        .note("second neighbor must lie at least the closeness cutoff away from the first neighbor");
    if let Some(p) = &args.ids {
        prov = prov.input("ids", p)?;
    }
    if let Some(p) = &args.vocab {
        prov = prov.input("vocab", p)?;
    }

    let mut staged = Staged::default();
    staged.add(&args.output, |w| {
        prov.write_comments(w)?;
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "nonword_id",
            "first_nn",
            "d1",
            "second_nn",
            "d2",
            "pseudo_ratio",
            "distance_ratio",
            "kept",
            "no_eligible_second",
        ])?;
        for r in &records {
            out.write_record([
                r.nonword_id.clone(),
                r.first_nn.clone(),
                r.d1.to_string(),
                r.second_nn.clone().unwrap_or_default(),
                opt(r.d2),
                r.pseudo_ratio.to_string(),
                opt(r.distance_ratio),
                r.kept.to_string(),
                r.no_eligible_second.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    })?;
    staged.commit()?;

    let kept = records.iter().filter(|r| r.kept).count();
    Ok(format!("kept {kept} of {} nonwords", records.len()))
}

pub fn cca(args: &CcaArgs) -> Result<String> {
    if !args.regularization.is_finite() || args.regularization < 0.0 {
        bail!("--regularization must be a finite non-negative number, got {}", args.regularization);
    }
    let ds = load_dataset(&args.dataset)?;
    let tokens = args.tokens.clone().unwrap_or(0..ds.token_count());
    let result = tokenwise_cca(&ds, tokens.clone(), args.regularization)
        .with_context(|| format!("dataset has {} tokens", ds.token_count()))?;

    let prov = Provenance::new("cca")
        .flag("tokens", format!("{}..{}", tokens.start, tokens.end))
        .flag("regularization", args.regularization)
        .dataset(&args.dataset)?
        .note(CCA_NOTE);
    let mut staged = Staged::default();
    staged.add(&args.output, |w| {
        prov.write_comments(w)?;
        if !result.degenerate_tokens.is_empty() {
            let list: Vec<String> = result.degenerate_tokens.iter().map(|t| t.to_string()).collect();
            writeln!(w, "# degenerate tokens: {}", list.join(" "))?;
        }
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["token", "max_correlation"])?;
        for (t, c) in result.tokens.iter().zip(&result.max_correlation_per_token) {
            out.write_record([t.to_string(), c.to_string()])?;
        }
        out.flush()?;
        Ok(())
    })?;
    staged.commit()?;

    let (best_t, best) = result
        .tokens
        .iter()
        .zip(&result.max_correlation_per_token)
        .fold((tokens.start, f64::NEG_INFINITY), |acc, (&t, &c)| if c > acc.1 { (t, c) } else { acc });
    Ok(format!(
        "max correlation {} at token {best_t} over {} samples",
        sig6(best),
        result.sample_count
    ))
}

//! Embedding containers and the on-disk `EMB1` format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "EMB1"
//! 4       4     version (u32 LE) = 1
//! 8       8     rows (u64 LE)
//! 16      4     token_count (u32 LE)
//! 20      4     dim (u32 LE)
//! 24      4     dtype (u32 LE), 1 = f32
//! 28      ...   rows * token_count * dim f32 LE values, order (row, token, dim)
//! ```
//!
//! A dataset directory holds a `manifest.json` sidecar naming one pooled and
//! one hidden file plus the word list that indexes their rows.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"EMB1";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 1;
pub const HEADER_LEN: usize = 28;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpaceKind {
    Pooled,
    Hidden,
}

/// Shape and provenance of one embedding space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpaceMeta {
    pub kind: SpaceKind,
    pub token_count: usize,
    pub dim: usize,
    pub prompt_template: String,
}

impl SpaceMeta {
    pub fn pooled(dim: usize, prompt_template: impl Into<String>) -> Self {
        SpaceMeta {
            kind: SpaceKind::Pooled,
            token_count: 1,
            dim,
            prompt_template: prompt_template.into(),
        }
    }

    pub fn hidden(token_count: usize, dim: usize, prompt_template: impl Into<String>) -> Self {
        SpaceMeta {
            kind: SpaceKind::Hidden,
            token_count,
            dim,
            prompt_template: prompt_template.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.token_count == 0 {
            return Err(Error::Invalid(format!(
                "space shape must be positive, got token_count={} dim={}",
                self.token_count, self.dim
            )));
        }
        if self.kind == SpaceKind::Pooled && self.token_count != 1 {
            return Err(Error::Invalid(format!(
                "pooled space must have token_count 1, got {}",
                self.token_count
            )));
        }
        Ok(())
    }

    /// Length of one row once flattened (`T * D`).
    pub fn flat_len(&self) -> usize {
        self.token_count * self.dim
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSpace {
    pub file: String,
    pub kind: SpaceKind,
    pub token_count: usize,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub words: Vec<String>,
    pub prompt_template: String,
    pub spaces: Vec<ManifestSpace>,
}

/// Aligned word list with its pooled (`n x D`) and hidden (`n x T x D`)
/// embeddings. Immutable once built.
#[derive(Debug, Clone)]
pub struct EmbeddingDataset {
    words: Vec<String>,
    index: HashMap<String, usize>,
    pooled: Array2<f32>,
    hidden: Array3<f32>,
    meta_pooled: SpaceMeta,
    meta_hidden: SpaceMeta,
}

impl EmbeddingDataset {
    pub fn new(
        words: Vec<String>,
        pooled: Array2<f32>,
        hidden: Array3<f32>,
        prompt_template: impl Into<String>,
    ) -> Result<Self> {
        let template = prompt_template.into();
        let meta_pooled = SpaceMeta::pooled(pooled.ncols(), template.clone());
        let (_, t, d) = hidden.dim();
        let meta_hidden = SpaceMeta::hidden(t, d, template);
        meta_pooled.validate()?;
        meta_hidden.validate()?;

        let n = words.len();
        if pooled.nrows() != n {
            return Err(Error::Alignment {
                what: "pooled matrix".into(),
                expected: n,
                found: pooled.nrows(),
            });
        }
        if hidden.len_of(Axis(0)) != n {
            return Err(Error::Alignment {
                what: "hidden tensor".into(),
                expected: n,
                found: hidden.len_of(Axis(0)),
            });
        }

        let mut index = HashMap::with_capacity(n);
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::DuplicateWord(w.clone()));
            }
        }

        check_finite("pooled matrix", pooled.view().insert_axis(Axis(1)))?;
        check_finite("hidden tensor", hidden.view())?;

        Ok(EmbeddingDataset {
            words,
            index,
            pooled: pooled.as_standard_layout().into_owned(),
            hidden: hidden.as_standard_layout().into_owned(),
            meta_pooled,
            meta_hidden,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Pooled dimensionality `D`.
    pub fn dim(&self) -> usize {
        self.meta_pooled.dim
    }

    pub fn token_count(&self) -> usize {
        self.meta_hidden.token_count
    }

    pub fn hidden_dim(&self) -> usize {
        self.meta_hidden.dim
    }

    pub fn meta_pooled(&self) -> &SpaceMeta {
        &self.meta_pooled
    }

    pub fn meta_hidden(&self) -> &SpaceMeta {
        &self.meta_hidden
    }

    pub fn prompt_template(&self) -> &str {
        &self.meta_pooled.prompt_template
    }

    pub fn pooled(&self) -> ArrayView2<'_, f32> {
        self.pooled.view()
    }

    pub fn hidden(&self) -> ArrayView3<'_, f32> {
        self.hidden.view()
    }

    /// Hidden anchors viewed as `n x (T*D)` flattened rows.
    pub fn hidden_flat(&self) -> ArrayView2<'_, f32> {
        let n = self.len();
        let flat = self.meta_hidden.flat_len();
        self.hidden
            .view()
            .into_shape_with_order((n, flat))
            .expect("hidden tensor is kept in standard layout")
    }

    pub fn pooled_row(&self, i: usize) -> ArrayView1<'_, f32> {
        self.pooled.row(i)
    }

    pub fn hidden_row(&self, i: usize) -> ArrayView2<'_, f32> {
        self.hidden.index_axis(Axis(0), i)
    }

    pub fn manifest(&self, pooled_file: &str, hidden_file: &str) -> Manifest {
        Manifest {
            words: self.words.clone(),
            prompt_template: self.prompt_template().to_string(),
            spaces: vec![
                ManifestSpace {
                    file: pooled_file.to_string(),
                    kind: SpaceKind::Pooled,
                    token_count: 1,
                    dim: self.dim(),
                },
                ManifestSpace {
                    file: hidden_file.to_string(),
                    kind: SpaceKind::Hidden,
                    token_count: self.token_count(),
                    dim: self.hidden_dim(),
                },
            ],
        }
    }
}

fn check_finite(what: &str, values: ArrayView3<'_, f32>) -> Result<()> {
    if let Some(((row, token, dim), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: what.to_string(),
            location: format!("row {row}, token {token}, dim {dim}"),
        });
    }
    Ok(())
}

/// Contents of one `EMB1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub token_count: usize,
    pub dim: usize,
    /// `rows x token_count x dim`.
    pub data: Array3<f32>,
}

impl EmbeddingFile {
    pub fn rows(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    /// Rows flattened to `rows x (token_count*dim)`; for pooled files this is
    /// the plain `rows x dim` matrix.
    pub fn into_matrix(self) -> Array2<f32> {
        let rows = self.rows();
        let flat = self.token_count * self.dim;
        self.data
            .into_shape_with_order((rows, flat))
            .expect("embedding file data is in standard layout")
    }
}

/// Serializes `tensor` as an `EMB1` stream.
pub fn encode_embedding<W: Write>(
    tensor: ArrayView3<'_, f32>,
    meta: &SpaceMeta,
    mut out: W,
) -> std::io::Result<()> {
    let (rows, t, d) = tensor.dim();
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(&MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&(rows as u64).to_le_bytes());
    header.extend_from_slice(&(t as u32).to_le_bytes());
    header.extend_from_slice(&(d as u32).to_le_bytes());
    header.extend_from_slice(&DTYPE_F32.to_le_bytes());
    debug_assert_eq!(header.len(), HEADER_LEN);
    debug_assert_eq!((t, d), (meta.token_count, meta.dim));
    out.write_all(&header)?;

    let mut payload = Vec::with_capacity(tensor.len() * 4);
    // iter() walks in logical (row, token, dim) order for any layout
    for v in tensor.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&payload)?;
    out.flush()
}

fn check_meta_shape(tensor: &ArrayView3<'_, f32>, meta: &SpaceMeta) -> Result<()> {
    meta.validate()?;
    let (_, t, d) = tensor.dim();
    if t != meta.token_count {
        return Err(Error::DimensionMismatch {
            what: "token count",
            expected: meta.token_count,
            found: t,
        });
    }
    if d != meta.dim {
        return Err(Error::DimensionMismatch {
            what: "embedding dim",
            expected: meta.dim,
            found: d,
        });
    }
    Ok(())
}

pub fn write_embedding_file(
    tensor: ArrayView3<'_, f32>,
    meta: &SpaceMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    check_meta_shape(&tensor, meta)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    encode_embedding(tensor, meta, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

/// Writes `tensor` after validating it against `meta`, into any writer.
pub fn write_embedding<W: Write>(
    tensor: ArrayView3<'_, f32>,
    meta: &SpaceMeta,
    out: W,
) -> Result<()> {
    check_meta_shape(&tensor, meta)?;
    encode_embedding(tensor, meta, out).map_err(|e| Error::io("<stream>", e))
}

pub fn decode_embedding(bytes: &[u8], path: &Path) -> Result<EmbeddingFile> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            path,
            format!("file too short for EMB1 header ({} bytes)", bytes.len()),
        ));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic bytes {:02x?}, expected \"EMB1\"", &bytes[0..4]),
        ));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let token_count = u32_at(16) as usize;
    let dim = u32_at(20) as usize;
    let dtype = u32_at(24);
    if dtype != DTYPE_F32 {
        return Err(Error::format(path, format!("unsupported dtype code {dtype}")));
    }
    if token_count == 0 || dim == 0 {
        return Err(Error::format(
            path,
            format!("zero-sized shape token_count={token_count} dim={dim}"),
        ));
    }
    let rows = usize::try_from(rows).map_err(|_| Error::format(path, "row count overflows"))?;
    let count = rows
        .checked_mul(token_count)
        .and_then(|x| x.checked_mul(dim))
        .ok_or_else(|| Error::format(path, "payload size overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != count * 4 {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, header implies {} ({rows}x{token_count}x{dim} f32)",
                payload.len(),
                count * 4
            ),
        ));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        let per_row = token_count * dim;
        return Err(Error::NonFinite {
            what: path.display().to_string(),
            location: format!(
                "row {}, token {}, dim {}",
                i / per_row,
                (i % per_row) / dim,
                i % dim
            ),
        });
    }
    let data = Array3::from_shape_vec((rows, token_count, dim), values)
        .expect("length checked against header");
    Ok(EmbeddingFile {
        token_count,
        dim,
        data,
    })
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embedding(&bytes, path)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let manifest = read_manifest(dir)?;
    let manifest_path = dir.join(MANIFEST_FILE);

    let find = |kind: SpaceKind| -> Result<&ManifestSpace> {
        let mut it = manifest.spaces.iter().filter(|s| s.kind == kind);
        let space = it
            .next()
            .ok_or_else(|| Error::format(&manifest_path, format!("no {kind:?} space listed")))?;
        if it.next().is_some() {
            return Err(Error::format(
                &manifest_path,
                format!("more than one {kind:?} space listed"),
            ));
        }
        Ok(space)
    };
    let pooled_space = find(SpaceKind::Pooled)?;
    let hidden_space = find(SpaceKind::Hidden)?;

    let load = |space: &ManifestSpace| -> Result<EmbeddingFile> {
        let path = dir.join(&space.file);
        let file = read_embedding_file(&path)?;
        if file.token_count != space.token_count || file.dim != space.dim {
            return Err(Error::format(
                &path,
                format!(
                    "header shape {}x{} disagrees with manifest {}x{}",
                    file.token_count, file.dim, space.token_count, space.dim
                ),
            ));
        }
        if file.rows() != manifest.words.len() {
            return Err(Error::Alignment {
                what: path.display().to_string(),
                expected: manifest.words.len(),
                found: file.rows(),
            });
        }
        Ok(file)
    };
    let pooled = load(pooled_space)?;
    if pooled.token_count != 1 {
        return Err(Error::format(
            dir.join(&pooled_space.file),
            "pooled space must have token_count 1",
        ));
    }
    let hidden = load(hidden_space)?;

    EmbeddingDataset::new(
        manifest.words,
        pooled.into_matrix(),
        hidden.data,
        manifest.prompt_template,
    )
}

pub const POOLED_FILE: &str = "pooled.emb1";
pub const HIDDEN_FILE: &str = "hidden.emb1";

/// Writes `manifest.json`, `pooled.emb1` and `hidden.emb1` into `dir`.
pub fn write_dataset(dataset: &EmbeddingDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pooled = dataset.pooled().insert_axis(Axis(1));
    write_embedding_file(pooled, dataset.meta_pooled(), dir.join(POOLED_FILE))?;
    write_embedding_file(dataset.hidden(), dataset.meta_hidden(), dir.join(HIDDEN_FILE))?;
    let manifest = dataset.manifest(POOLED_FILE, HIDDEN_FILE);
    let path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// A hidden-state embedding flattened row-major: `values[t*D + d] = h[t][d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatHiddenVector {
    pub token_count: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl FlatHiddenVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn unflatten(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.token_count, self.dim), |(t, d)| {
            self.values[t * self.dim + d]
        })
    }
}

pub fn flatten_hidden<A: Copy + Into<f64>>(h: ArrayView2<'_, A>) -> FlatHiddenVector {
    let (token_count, dim) = h.dim();
    FlatHiddenVector {
        token_count,
        dim,
        values: h.iter().map(|&v| v.into()).collect(),
    }
}

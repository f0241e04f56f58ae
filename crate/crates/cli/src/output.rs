use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

pub const PSEUDO_RATIO_NOTE: &str = "pseudo_ratio = d1 / (d1 + d2); distance_ratio = d1 / d2";
pub const SPEARMAN_NOTE: &str =
    "rank correlation: Pearson on global average ranks over the union of the two ell-nearest sets";
pub const CCA_NOTE: &str =
    "cca: columns centered, not scaled; ridge = regularization * mean variance added to each covariance";
pub const LSTSQ_NOTE: &str = "least squares without intercept, minimum-norm SVD solve";
pub const PRESENCE_NOTE: &str = "present when score >= threshold; ratios snapped to the 0.1 grid";

/// Run metadata embedded in every report. Output paths and `--threads` are
/// left out so that reruns produce identical bytes.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'static str,
    pub flags: BTreeMap<&'static str, String>,
    /// SHA-256 of each input file, keyed by role.
    pub inputs: BTreeMap<&'static str, String>,
    pub conventions: Vec<&'static str>,
}

impl Provenance {
    pub fn new(subcommand: &'static str) -> Self {
        Provenance {
            tool: env!("CARGO_BIN_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            flags: BTreeMap::new(),
            inputs: BTreeMap::new(),
            conventions: Vec::new(),
        }
    }

    pub fn flag(mut self, name: &'static str, value: impl ToString) -> Self {
        self.flags.insert(name, value.to_string());
        self
    }

    pub fn input(mut self, role: &'static str, path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(role, hex::encode(Sha256::digest(&bytes)));
        Ok(self)
    }

    pub fn dataset(self, dir: &Path) -> Result<Self> {
        self.input("dataset_manifest", &dir.join(blendconv::embedstore::MANIFEST_FILE))
    }

    pub fn note(mut self, text: &'static str) -> Self {
        self.conventions.push(text);
        self
    }

    /// `#`-prefixed lines placed ahead of a CSV header.
    pub fn write_comments(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "# {} {} {}", self.tool, self.version, self.subcommand)?;
        for (k, v) in &self.flags {
            writeln!(out, "# flag {k}: {v}")?;
        }
        for (k, v) in &self.inputs {
            writeln!(out, "# sha256 {k}: {v}")?;
        }
        for c in &self.conventions {
            writeln!(out, "# convention: {c}")?;
        }
        Ok(())
    }
}

/// Output files written to temporaries next to their targets and renamed
/// into place together by [`Staged::commit`]. Dropping without committing
/// removes the temporaries.
#[derive(Default)]
pub struct Staged {
    files: Vec<(NamedTempFile, PathBuf)>,
}

impl Staged {
    pub fn add(&mut self, path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut builder = tempfile::Builder::new();
        builder.prefix(".blendconv-");
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            builder.permissions(fs::Permissions::from_mode(0o644));
        }
        let mut tmp = builder
            .tempfile_in(dir)
            .with_context(|| format!("creating output next to {}", path.display()))?;
        {
            let mut w = BufWriter::new(tmp.as_file_mut());
            write(&mut w)?;
            w.flush().with_context(|| format!("writing {}", path.display()))?;
        }
        self.files.push((tmp, path.to_path_buf()));
        Ok(())
    }

    pub fn add_json<T: Serialize>(&mut self, path: &Path, value: &T) -> Result<()> {
        self.add(path, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }

    pub fn commit(self) -> Result<()> {
        for (tmp, path) in self.files {
            tmp.persist(&path)
                .map_err(|e| e.error)
                .with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

/// `x` rounded to six significant digits, for summaries.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    if !(-5..=15).contains(&magnitude) {
        return format!("{x:.5e}");
    }
    let decimals = (5 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(1.0), "1.00000");
        assert_eq!(sig6(10.2998), "10.2998");
        assert_eq!(sig6(0.000123456789), "0.000123457");
        assert_eq!(sig6(-2.5), "-2.50000");
        assert_eq!(sig6(123456789.0), "123456789");
        assert_eq!(sig6(1e-9), "1.00000e-9");
    }

    #[test]
    fn staged_files_appear_only_on_commit() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("out.txt");
        let mut staged = Staged::default();
        staged.add(&target, |w| Ok(w.write_all(b"hello")?)).unwrap();
        assert!(!target.exists());
        staged.commit().unwrap();
        assert_eq!(fs::read(&target).unwrap(), b"hello");

        let other = dir.path().join("other.txt");
        let mut staged = Staged::default();
        staged.add(&other, |w| Ok(w.write_all(b"x")?)).unwrap();
        drop(staged);
        assert!(!other.exists());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn comments_are_stable() {
        let p = Provenance::new("cca").flag("regularization", 1e-6).note(CCA_NOTE);
        let mut buf = Vec::new();
        p.write_comments(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# blendconv "));
        assert!(text.contains("# flag regularization: 0.000001\n"));
        assert!(text.lines().all(|l| l.starts_with("# ")));
    }
}

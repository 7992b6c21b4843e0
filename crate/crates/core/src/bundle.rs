//! Matrix bundles: a directory holding `manifest.json` and one raw
//! row-major little-endian `f64` file per array.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gabor::{FeatureMatrix, Transform};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "vspam-matrix-bundle";
pub const VERSION: u32 = 1;
pub const DTYPE: &str = "f64le";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
    pub file: String,
    #[serde(default)]
    pub tags: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub arrays: Vec<ArrayEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            arrays: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MatrixBundle {
    dir: PathBuf,
    manifest: Manifest,
}

fn corrupt(name: &str, reason: impl Into<String>) -> Error {
    Error::CorruptBundle {
        name: name.to_string(),
        reason: reason.into(),
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
        && !name.starts_with('.')
}

impl MatrixBundle {
    /// Starts an empty bundle in `dir`, creating the directory.
    pub fn create(dir: impl AsRef<Path>) -> Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(Self {
            dir: dir.as_ref().to_path_buf(),
            manifest: Manifest::default(),
        })
    }

    /// Opens a bundle, checking every declared size against its file before
    /// any payload is read.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST);
        if !path.is_file() {
            return Err(Error::MissingInput(path));
        }
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
        if manifest.format != FORMAT {
            return Err(corrupt(MANIFEST, format!("unknown format `{}`", manifest.format)));
        }
        if manifest.version != VERSION {
            return Err(corrupt(MANIFEST, format!("unsupported version {}", manifest.version)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for a in &manifest.arrays {
            if !seen.insert(a.name.as_str()) {
                return Err(corrupt(&a.name, "duplicate array name"));
            }
            if a.dtype != DTYPE {
                return Err(corrupt(&a.name, format!("unsupported dtype `{}`", a.dtype)));
            }
            if !valid_name(&a.file) {
                return Err(corrupt(&a.name, format!("invalid file name `{}`", a.file)));
            }
            let blob = dir.join(&a.file);
            let len = match fs::metadata(&blob) {
                Ok(m) => m.len(),
                Err(_) => return Err(Error::MissingInput(blob)),
            };
            let expected = (a.rows as u64)
                .checked_mul(a.cols as u64)
                .and_then(|v| v.checked_mul(8))
                .ok_or_else(|| corrupt(&a.name, "declared size overflows"))?;
            if len != expected {
                return Err(corrupt(
                    &a.name,
                    format!("declared {}x{} needs {expected} bytes, file has {len}", a.rows, a.cols),
                ));
            }
        }
        Ok(Self { dir, manifest })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn entry(&self, name: &str) -> Option<&ArrayEntry> {
        self.manifest.arrays.iter().find(|a| a.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entry(name).is_some()
    }

    /// Writes the payload immediately and replaces any array of the same
    /// name; call [`MatrixBundle::finish`] to write the manifest.
    pub fn put(&mut self, name: &str, m: &DMatrix<f64>, tags: BTreeMap<String, String>) -> Result<()> {
        if !valid_name(name) {
            return Err(crate::error::invalid_arg(format!("invalid array name `{name}`")));
        }
        let file = format!("{name}.bin");
        let mut bytes = Vec::with_capacity(m.len() * 8);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                bytes.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
        fs::write(self.dir.join(&file), bytes)?;
        let entry = ArrayEntry {
            name: name.to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
            dtype: DTYPE.into(),
            file,
            tags,
        };
        match self.manifest.arrays.iter_mut().find(|a| a.name == name) {
            Some(slot) => *slot = entry,
            None => self.manifest.arrays.push(entry),
        }
        Ok(())
    }

    pub fn put_features(&mut self, name: &str, f: &FeatureMatrix, seed: Option<u64>) -> Result<()> {
        let mut tags = BTreeMap::new();
        tags.insert("transform".into(), f.transform.tag().into());
        tags.insert("bank_hash".into(), f.bank_hash.clone());
        if let Some(s) = seed {
            tags.insert("seed".into(), s.to_string());
        }
        self.put(name, &f.values, tags)
    }

    pub fn finish(&self) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest)?;
        fs::write(self.dir.join(MANIFEST), json + "\n")?;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<DMatrix<f64>> {
        let a = self
            .entry(name)
            .ok_or_else(|| Error::MissingInput(self.dir.join(format!("{name}.bin"))))?;
        let bytes = fs::read(self.dir.join(&a.file))?;
        if bytes.len() != a.rows * a.cols * 8 {
            return Err(corrupt(name, "payload changed size after validation"));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(DMatrix::from_row_slice(a.rows, a.cols, &values))
    }

    pub fn get_features(&self, name: &str) -> Result<FeatureMatrix> {
        let values = self.get(name)?;
        let a = self.entry(name).expect("entry exists after get");
        let transform = a
            .tags
            .get("transform")
            .and_then(|t| Transform::from_tag(t))
            .ok_or_else(|| corrupt(name, "missing or unknown transform tag"))?;
        let hash = a
            .tags
            .get("bank_hash")
            .ok_or_else(|| corrupt(name, "missing bank_hash tag"))?;
        FeatureMatrix::new(values, transform, hash.clone())
    }
}

//! Tensor container: a directory holding `manifest.json` plus one raw
//! little-endian `f32` file per tensor, stored row-major.
//!
//! String lists (phrase pools, class names) ride along as UTF-8 JSON arrays
//! listed in the manifest's `texts` section. The manifest is the only source
//! of shapes; file lengths are checked against it, never used to infer it.
//!
//! Roles used across the crate:
//!
//! | role                      | producer            |
//! |---------------------------|---------------------|
//! | `weights.*`               | [`crate::weights`]  |
//! | `trace.post_gelu`, `trace.attn_class_row`, `trace.ln_mu`, `trace.ln_sigma`, `trace.class_token_prelnpost`, `trace.msa_class_out`, `trace.representation` | [`crate::engine`] |
//! | `effects.phi`, `effects.norms`, `effects.mean`, `effects.phi_sum`, `effects.top_index`, `effects.neurons` | [`crate::effects`] |
//! | `rank1.r`, `rank1.b`, `rank1.var_explained`, `rank1.support_size`, `rank1.degenerate`, `rank1.neurons` | [`crate::rank1`] |
//! | `pool.embeddings`, `pool.phrases` | [`crate::sparse`] |
//! | `classes.embeddings`, `classes.names`, `classes.labels` | [`crate::eval`] |
//! | `inputs.images`, `masks.ground_truth`, `segment.degenerate` | [`crate::pipeline`] |
//! | `segment.grid`, `segment.upsampled`, `segment.mask` | [`crate::apps::segment`] |

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "neuronscope-container";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub file: String,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextEntry {
    pub name: String,
    pub file: String,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub format: String,
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub texts: Vec<TextEntry>,
    /// Free-form provenance (model spec, preprocessing constants, ...).
    #[serde(default, skip_serializing_if = "serde_json::Map::is_empty")]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl TensorManifest {
    pub fn new() -> Self {
        TensorManifest {
            format: FORMAT_TAG.to_string(),
            version: VERSION,
            entries: Vec::new(),
            texts: Vec::new(),
            metadata: serde_json::Map::new(),
        }
    }
}

impl Default for TensorManifest {
    fn default() -> Self {
        Self::new()
    }
}

/// In-memory contents of a container.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    pub tensors: BTreeMap<String, ArrayD<f32>>,
    pub texts: BTreeMap<String, Vec<String>>,
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f32>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn insert_text(&mut self, name: impl Into<String>, lines: Vec<String>) {
        self.texts.insert(name.into(), lines);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn take(&mut self, name: &str) -> Result<ArrayD<f32>> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn text(&self, name: &str) -> Result<&[String]> {
        self.texts
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Manifest with `role == name` and `file == name.bin` for every entry.
    pub fn default_manifest(&self) -> TensorManifest {
        let mut manifest = TensorManifest::new();
        for (name, t) in &self.tensors {
            manifest.entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: DType::F32,
                file: format!("{name}.bin"),
                role: name.clone(),
            });
        }
        for name in self.texts.keys() {
            manifest.texts.push(TextEntry {
                name: name.clone(),
                file: format!("{name}.json"),
                role: name.clone(),
            });
        }
        manifest.metadata = self.metadata.clone();
        manifest
    }

    /// Writes with [`TensorMap::default_manifest`].
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_container(&self.default_manifest(), self, dir)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        read_container(dir).map(|(_, map)| map)
    }
}

fn check_file_name(entry: &str, file: &str) -> Result<()> {
    let bad = file.is_empty()
        || file == MANIFEST_FILE
        || file.contains('/')
        || file.contains('\\')
        || file.starts_with('.');
    if bad {
        return Err(Error::container(
            entry,
            format!("illegal file name `{file}`"),
        ));
    }
    Ok(())
}

fn check_manifest(manifest: &TensorManifest) -> Result<()> {
    if manifest.format != FORMAT_TAG {
        return Err(Error::container(
            MANIFEST_FILE,
            format!("unknown format tag `{}`", manifest.format),
        ));
    }
    if manifest.version != VERSION {
        return Err(Error::UnsupportedVersion(manifest.version));
    }
    let mut names = BTreeSet::new();
    let mut files = BTreeSet::new();
    for e in &manifest.entries {
        if !names.insert(e.name.as_str()) {
            return Err(Error::container(&e.name, "duplicate entry name"));
        }
        if e.shape.contains(&0) {
            return Err(Error::container(
                &e.name,
                format!("non-positive shape {:?}", e.shape),
            ));
        }
        check_file_name(&e.name, &e.file)?;
        if !files.insert(e.file.as_str()) {
            return Err(Error::container(&e.name, "file shared with another entry"));
        }
    }
    for t in &manifest.texts {
        if !names.insert(t.name.as_str()) {
            return Err(Error::container(&t.name, "duplicate entry name"));
        }
        check_file_name(&t.name, &t.file)?;
        if !files.insert(t.file.as_str()) {
            return Err(Error::container(&t.name, "file shared with another entry"));
        }
    }
    Ok(())
}

/// Reads a container directory. Every tensor is validated against its
/// manifest entry; the error names the first offending entry.
pub fn read_container(dir: &Path) -> Result<(TensorManifest, TensorMap)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let raw = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: TensorManifest = serde_json::from_slice(&raw).map_err(|e| Error::Json {
        path: manifest_path.clone(),
        source: e,
    })?;
    check_manifest(&manifest)?;

    let mut map = TensorMap::new();
    for e in &manifest.entries {
        let path = dir.join(&e.file);
        let bytes = fs::read(&path).map_err(|err| {
            if err.kind() == std::io::ErrorKind::NotFound {
                Error::container(&e.name, format!("missing file `{}`", e.file))
            } else {
                Error::io(&path, err)
            }
        })?;
        let count: usize = e.shape.iter().product();
        if bytes.len() != 4 * count {
            return Err(Error::container(
                &e.name,
                format!(
                    "byte length {} does not match shape {:?} ({} bytes expected)",
                    bytes.len(),
                    e.shape,
                    4 * count
                ),
            ));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = ArrayD::from_shape_vec(IxDyn(&e.shape), data)
            .map_err(|err| Error::container(&e.name, err.to_string()))?;
        map.tensors.insert(e.name.clone(), tensor);
    }
    for t in &manifest.texts {
        let path = dir.join(&t.file);
        let bytes = fs::read(&path).map_err(|err| {
            if err.kind() == std::io::ErrorKind::NotFound {
                Error::container(&t.name, format!("missing file `{}`", t.file))
            } else {
                Error::io(&path, err)
            }
        })?;
        let lines: Vec<String> = serde_json::from_slice(&bytes)
            .map_err(|err| Error::container(&t.name, format!("bad string list: {err}")))?;
        map.texts.insert(t.name.clone(), lines);
    }
    map.metadata = manifest.metadata.clone();
    Ok((manifest, map))
}

/// Writes `tensors` into `dir` as described by `manifest`. The directory is
/// created if needed. Output bytes depend only on the inputs.
pub fn write_container(manifest: &TensorManifest, tensors: &TensorMap, dir: &Path) -> Result<()> {
    check_manifest(manifest)?;
    if manifest.entries.len() != tensors.tensors.len() {
        return Err(Error::container(
            MANIFEST_FILE,
            format!(
                "manifest lists {} tensors but {} were supplied",
                manifest.entries.len(),
                tensors.tensors.len()
            ),
        ));
    }
    if manifest.texts.len() != tensors.texts.len() {
        return Err(Error::container(
            MANIFEST_FILE,
            format!(
                "manifest lists {} string lists but {} were supplied",
                manifest.texts.len(),
                tensors.texts.len()
            ),
        ));
    }
    for e in &manifest.entries {
        let t = tensors
            .tensors
            .get(&e.name)
            .ok_or_else(|| Error::container(&e.name, "listed in manifest but not supplied"))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Shape {
                name: e.name.clone(),
                expected: e.shape.clone(),
                found: t.shape().to_vec(),
            });
        }
    }
    for t in &manifest.texts {
        if !tensors.texts.contains_key(&t.name) {
            return Err(Error::container(
                &t.name,
                "listed in manifest but not supplied",
            ));
        }
    }

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for e in &manifest.entries {
        let t = &tensors.tensors[&e.name];
        let mut bytes = Vec::with_capacity(4 * t.len());
        // iter() walks in logical (row-major) order regardless of memory layout
        for v in t.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write_file(&dir.join(&e.file), &bytes)?;
    }
    for t in &manifest.texts {
        let json = serde_json::to_vec(&tensors.texts[&t.name]).expect("string list serializes");
        write_file(&dir.join(&t.file), &json)?;
    }
    let mut json = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    json.push(b'\n');
    write_file(&dir.join(MANIFEST_FILE), &json)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

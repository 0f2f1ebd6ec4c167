//! Checkpoint directories.
//!
//! A checkpoint is a directory holding `manifest.json` and one raw
//! little-endian `f32` blob per tensor, named `layer{i}.{role}.f32` with
//! role `w`, `a`, `b` or `bias`. Parameters are stored at 32-bit precision;
//! pipeline stages round their models through `f32` before saving so that a
//! resumed run sees exactly the values an uninterrupted one would.
//!
//! Writes go to a sibling temporary directory that is renamed into place.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::compress::CompressionReport;
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseLayer, FactorizedLayer, Layer, Model};
use crate::ranksel::RankVector;

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Trained,
    RankSelected,
    Regularized,
    Factorized,
    Finetuned,
    Quantized,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("unit variant");
        f.write_str(v.as_str().expect("string tag"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Factorized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub role: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub kind: LayerKind,
    pub m: usize,
    pub n: usize,
    pub rank: Option<usize>,
    pub activation: Activation,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: Stage,
    pub classes: usize,
    pub layers: Vec<LayerEntry>,
    pub dataset_fingerprint: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub ranks: Option<RankVector>,
    pub report: Option<CompressionReport>,
}

/// Everything a pipeline stage hands to the next one.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model: Model,
    pub ranks: Option<RankVector>,
    pub dataset_fingerprint: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub report: Option<CompressionReport>,
}

impl Checkpoint {
    pub fn new(stage: Stage, model: Model) -> Self {
        Self {
            stage,
            model,
            ranks: None,
            dataset_fingerprint: None,
            seeds: BTreeMap::new(),
            report: None,
        }
    }
}

fn tensors_of(layer: &Layer) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
    let mat = |m: &Array2<f64>| (vec![m.nrows(), m.ncols()], m.iter().copied().collect::<Vec<_>>());
    let mut out = Vec::new();
    match layer {
        Layer::Dense(d) => {
            let (s, v) = mat(&d.w);
            out.push(("w", s, v));
        }
        Layer::Factorized(f) => {
            let (s, v) = mat(&f.a);
            out.push(("a", s, v));
            let (s, v) = mat(&f.b);
            out.push(("b", s, v));
        }
    }
    out.push(("bias", vec![layer.bias().len()], layer.bias().to_vec()));
    out
}

fn encode(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn decode(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect()
}

/// Canonical JSON: object keys sorted, two-space indentation, trailing
/// newline.
pub fn to_canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::invalid(format!("serialization failed: {e}")))?;
    let mut s = serde_json::to_string_pretty(&v).expect("values always serialize");
    s.push('\n');
    Ok(s)
}

fn tmp_sibling(path: &Path, tag: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Replaces `dest` with the fully written `staged` path.
fn commit(staged: &Path, dest: &Path) -> Result<()> {
    if dest.is_dir() {
        let old = tmp_sibling(dest, "old");
        fs::rename(dest, &old).map_err(|e| Error::io(dest, e))?;
        fs::rename(staged, dest).map_err(|e| Error::io(dest, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(staged, dest).map_err(|e| Error::io(dest, e))?;
    }
    Ok(())
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ckpt.model.validate()?;
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let staged = tmp_sibling(dir, "tmp");
    if staged.exists() {
        fs::remove_dir_all(&staged).map_err(|e| Error::io(&staged, e))?;
    }
    fs::create_dir(&staged).map_err(|e| Error::io(&staged, e))?;

    let mut layers = Vec::with_capacity(ckpt.model.layers.len());
    for (i, layer) in ckpt.model.layers.iter().enumerate() {
        let mut tensors = Vec::new();
        for (role, shape, values) in tensors_of(layer) {
            let file = format!("layer{i}.{role}.f32");
            write_file(&staged.join(&file), &encode(&values))?;
            tensors.push(TensorEntry {
                role: role.to_string(),
                file,
                shape,
            });
        }
        layers.push(LayerEntry {
            kind: match layer {
                Layer::Dense(_) => LayerKind::Dense,
                Layer::Factorized(_) => LayerKind::Factorized,
            },
            m: layer.out_dim(),
            n: layer.in_dim(),
            rank: layer.rank(),
            activation: layer.activation(),
            tensors,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        stage: ckpt.stage,
        classes: ckpt.model.classes,
        layers,
        dataset_fingerprint: ckpt.dataset_fingerprint.clone(),
        seeds: ckpt.seeds.clone(),
        ranks: ckpt.ranks.clone(),
        report: ckpt.report.clone(),
    };
    write_file(&staged.join(MANIFEST), to_canonical_json(&manifest)?.as_bytes())?;
    commit(&staged, dir)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

fn read_tensor(dir: &Path, entry: &TensorEntry, want: &[usize]) -> Result<Vec<f64>> {
    let path = dir.join(&entry.file);
    if entry.shape != want {
        return Err(Error::format(
            &path,
            format!("shape mismatch: manifest declares {:?}, layer needs {:?}", entry.shape, want),
        ));
    }
    let bytes = fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::format(&path, "missing tensor blob"),
        _ => Error::io(&path, e),
    })?;
    let expected = want.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &path,
            format!("shape mismatch: {} bytes, expected {expected}", bytes.len()),
        ));
    }
    Ok(decode(&bytes))
}

fn tensor<'a>(dir: &Path, entry: &'a LayerEntry, role: &str) -> Result<&'a TensorEntry> {
    entry
        .tensors
        .iter()
        .find(|t| t.role == role)
        .ok_or_else(|| Error::format(dir.join(MANIFEST), format!("layer has no '{role}' tensor")))
}

fn matrix(dir: &Path, entry: &LayerEntry, role: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let values = read_tensor(dir, tensor(dir, entry, role)?, &[rows, cols])?;
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mpath = dir.join(MANIFEST);
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(&mpath, format!("unsupported format version {}", manifest.format_version)));
    }
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, e) in manifest.layers.iter().enumerate() {
        let expected_roles: &[&str] = match e.kind {
            LayerKind::Dense => &["w", "bias"],
            LayerKind::Factorized => &["a", "b", "bias"],
        };
        if e.tensors.len() != expected_roles.len() {
            return Err(Error::format(&mpath, format!("layer {i}: expected tensors {expected_roles:?}")));
        }
        let bias = Array1::from(read_tensor(dir, tensor(dir, e, "bias")?, &[e.m])?);
        let layer = match e.kind {
            LayerKind::Dense => Layer::Dense(DenseLayer {
                w: matrix(dir, e, "w", e.m, e.n)?,
                bias,
                activation: e.activation,
            }),
            LayerKind::Factorized => {
                let r = e
                    .rank
                    .ok_or_else(|| Error::format(&mpath, format!("layer {i}: factorized layer without rank")))?;
                Layer::Factorized(FactorizedLayer {
                    a: matrix(dir, e, "a", r, e.n)?,
                    b: matrix(dir, e, "b", e.m, r)?,
                    bias,
                    activation: e.activation,
                })
            }
        };
        layers.push(layer);
    }
    let model = Model::new(layers, manifest.classes).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if let Some(r) = &manifest.ranks {
        let ok = r.len() == model.layers.len()
            && r.iter()
                .zip(&model.layers)
                .all(|(&x, l)| x >= 1 && x <= l.in_dim().min(l.out_dim()));
        if !ok {
            return Err(Error::format(&mpath, format!("rank vector {r} does not fit the model")));
        }
    }
    Ok(Checkpoint {
        stage: manifest.stage,
        model,
        ranks: manifest.ranks,
        dataset_fingerprint: manifest.dataset_fingerprint,
        seeds: manifest.seeds,
        report: manifest.report,
    })
}

/// Writes `value` as canonical JSON via a temporary file and rename.
pub fn save_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let staged = tmp_sibling(path, "tmp");
    write_file(&staged, to_canonical_json(value)?.as_bytes())?;
    fs::rename(&staged, path).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes text (CSV) atomically.
pub fn save_text(text: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let staged = tmp_sibling(path, "tmp");
    write_file(&staged, text.as_bytes())?;
    fs::rename(&staged, path).map_err(|e| Error::io(path, e))
}

//! Model archive: `manifest.json` plus `weights.bin`, as a directory or a zip file.
//!
//! `weights.bin` is a concatenation of little-endian `f32` blobs in row-major order.
//! Each blob reference in the manifest gives its byte `offset`, byte `length` and
//! `shape`; `length` must equal `4 * product(shape)`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{infer_output_shape, Layer, LayerKind, LayerSpec, ModelError, ModelGraph};
use crate::tensor::Tensor;

pub const FORMAT_MAGIC: &str = "mcrp-model";
pub const FORMAT_VERSION: u32 = 1;

const MANIFEST_FILE: &str = "manifest.json";
const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    pub input_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_labels: Option<Vec<String>>,
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub keep_prob: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_blob: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias_blob: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_shape: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub name: String,
    pub offset: u64,
    pub length: u64,
    pub shape: Vec<usize>,
}

#[derive(Deserialize)]
struct Header {
    #[serde(default)]
    format: Option<String>,
    format_version: u32,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError + '_ {
    move |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_blob(layer: &str, blob: &BlobRef, weights: &[u8]) -> Result<Tensor, ModelError> {
    let end = blob.offset.saturating_add(blob.length);
    if end > weights.len() as u64 {
        return Err(ModelError::TruncatedBlob {
            layer: layer.into(),
            blob: blob.name.clone(),
            offset: blob.offset,
            end,
            available: weights.len() as u64,
        });
    }
    let n: usize = blob.shape.iter().product();
    if blob.shape.is_empty() || n == 0 || blob.length != 4 * n as u64 {
        return Err(ModelError::BlobLength {
            layer: layer.into(),
            blob: blob.name.clone(),
            bytes: blob.length,
            shape: blob.shape.clone(),
        });
    }
    let bytes = &weights[blob.offset as usize..end as usize];
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(blob.shape.clone(), data)?)
}

fn layer_from_entry(entry: &LayerEntry, weights: &[u8]) -> Result<Layer, ModelError> {
    let kind = LayerKind::parse(&entry.kind).ok_or_else(|| ModelError::UnknownLayerKind {
        layer: entry.name.clone(),
        kind: entry.kind.clone(),
    })?;
    let hp = &entry.hyperparams;
    let required_blob = |blob: &Option<BlobRef>, field: &str| -> Result<Tensor, ModelError> {
        match blob {
            Some(b) => read_blob(&entry.name, b, weights),
            None => Err(ModelError::MissingBlob {
                layer: entry.name.clone(),
                blob: field.into(),
            }),
        }
    };
    let optional_blob = |blob: &Option<BlobRef>| -> Result<Option<Tensor>, ModelError> {
        blob.as_ref()
            .map(|b| read_blob(&entry.name, b, weights))
            .transpose()
    };
    Ok(match kind {
        LayerKind::Dense => Layer::Dense {
            weights: required_blob(&entry.weight_blob, "weight_blob")?,
            bias: optional_blob(&entry.bias_blob)?,
        },
        LayerKind::Conv2d => Layer::Conv2d {
            kernels: required_blob(&entry.weight_blob, "weight_blob")?,
            bias: optional_blob(&entry.bias_blob)?,
            stride: hp.stride.unwrap_or(1),
            padding: hp.padding.unwrap_or(0),
        },
        LayerKind::MaxPool2d => {
            let window = hp.window.ok_or_else(|| ModelError::Hyperparam {
                layer: entry.name.clone(),
                detail: "maxpool2d needs a window".into(),
            })?;
            Layer::MaxPool2d {
                window,
                stride: hp.stride.unwrap_or(window),
            }
        }
        LayerKind::Relu => Layer::Relu,
        LayerKind::Flatten => Layer::Flatten,
        LayerKind::Dropout => Layer::Dropout {
            keep_prob: hp.keep_prob.ok_or_else(|| ModelError::Hyperparam {
                layer: entry.name.clone(),
                detail: "dropout needs keep_prob".into(),
            })?,
        },
    })
}

/// Builds a graph from raw manifest and weight bytes.
pub fn load_model_bytes(manifest: &[u8], weights: &[u8]) -> Result<ModelGraph, ModelError> {
    let header: Header = serde_json::from_slice(manifest)?;
    match header.format.as_deref() {
        Some(FORMAT_MAGIC) => {}
        other => {
            return Err(ModelError::BadMagic {
                found: other.unwrap_or("<missing>").into(),
            })
        }
    }
    if header.format_version != FORMAT_VERSION {
        return Err(ModelError::UnsupportedVersion(header.format_version));
    }
    let manifest: Manifest = serde_json::from_slice(manifest)?;

    let mut layers = Vec::with_capacity(manifest.layers.len());
    let mut shape = manifest.input_shape.clone();
    for entry in &manifest.layers {
        let spec = LayerSpec::new(entry.name.clone(), layer_from_entry(entry, weights)?);
        if let Some(declared) = &entry.input_shape {
            if *declared != shape {
                return Err(ModelError::Shape {
                    layer: entry.name.clone(),
                    detail: format!("declared input shape {declared:?}, chain gives {shape:?}"),
                });
            }
        }
        // Eager per-layer check so the error names the first broken layer.
        shape = infer_output_shape(&spec, &shape)?;
        if let Some(declared) = &entry.output_shape {
            if *declared != shape {
                return Err(ModelError::Shape {
                    layer: entry.name.clone(),
                    detail: format!("declared output shape {declared:?}, computed {shape:?}"),
                });
            }
        }
        layers.push(spec);
    }
    ModelGraph::new(manifest.input_shape, layers, manifest.class_labels)
}

fn is_zip(path: &Path) -> bool {
    let mut magic = [0u8; 4];
    fs::File::open(path)
        .and_then(|mut f| f.read_exact(&mut magic))
        .map(|_| magic == *b"PK\x03\x04")
        .unwrap_or(false)
}

fn read_archive_files(path: &Path) -> Result<(Vec<u8>, Vec<u8>), ModelError> {
    if path.is_dir() {
        let m = path.join(MANIFEST_FILE);
        let w = path.join(WEIGHTS_FILE);
        let manifest = fs::read(&m).map_err(io_err(&m))?;
        let weights = if w.exists() {
            fs::read(&w).map_err(io_err(&w))?
        } else {
            Vec::new()
        };
        return Ok((manifest, weights));
    }
    if !path.exists() {
        return Err(io_err(path)(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            "no such file or directory",
        )));
    }
    if !is_zip(path) {
        return Err(ModelError::Zip(format!(
            "{} is neither a directory nor a zip archive",
            path.display()
        )));
    }
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut zip = zip::ZipArchive::new(file).map_err(|e| ModelError::Zip(e.to_string()))?;
    let mut read_entry = |name: &str, required: bool| -> Result<Vec<u8>, ModelError> {
        let mut entry = match zip.by_name(name) {
            Ok(e) => e,
            Err(zip::result::ZipError::FileNotFound) if !required => return Ok(Vec::new()),
            Err(e) => return Err(ModelError::Zip(format!("{name}: {e}"))),
        };
        let mut buf = Vec::new();
        entry.read_to_end(&mut buf).map_err(io_err(path))?;
        Ok(buf)
    };
    let manifest = read_entry(MANIFEST_FILE, true)?;
    let weights = read_entry(WEIGHTS_FILE, false)?;
    Ok((manifest, weights))
}

/// Loads and validates an archive directory or zip file.
pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph, ModelError> {
    let (manifest, weights) = read_archive_files(path.as_ref())?;
    load_model_bytes(&manifest, &weights)
}

/// SHA-256 over `manifest.json` followed by `weights.bin`, hex encoded.
pub fn archive_checksum(path: impl AsRef<Path>) -> Result<String, ModelError> {
    let (manifest, weights) = read_archive_files(path.as_ref())?;
    let mut h = Sha256::new();
    h.update(&manifest);
    h.update(&weights);
    Ok(crate::hex_digest(&h.finalize()))
}

fn push_blob(weights: &mut Vec<u8>, name: String, t: &Tensor) -> BlobRef {
    let offset = weights.len() as u64;
    for v in t.data() {
        weights.extend_from_slice(&v.to_le_bytes());
    }
    BlobRef {
        name,
        offset,
        length: 4 * t.len() as u64,
        shape: t.shape().to_vec(),
    }
}

/// Serializes a graph into manifest and weight bytes.
pub fn encode_model(model: &ModelGraph) -> (Manifest, Vec<u8>) {
    let mut weights = Vec::new();
    let mut entries = Vec::with_capacity(model.layers().len());
    for (l, spec) in model.layers().iter().enumerate() {
        let mut hp = Hyperparams::default();
        let (mut wb, mut bb) = (None, None);
        match &spec.layer {
            Layer::Dense { weights: w, bias } => {
                wb = Some(push_blob(&mut weights, format!("{}.weight", spec.name), w));
                bb = bias
                    .as_ref()
                    .map(|b| push_blob(&mut weights, format!("{}.bias", spec.name), b));
            }
            Layer::Conv2d {
                kernels,
                bias,
                stride,
                padding,
            } => {
                hp.stride = Some(*stride);
                hp.padding = Some(*padding);
                wb = Some(push_blob(&mut weights, format!("{}.weight", spec.name), kernels));
                bb = bias
                    .as_ref()
                    .map(|b| push_blob(&mut weights, format!("{}.bias", spec.name), b));
            }
            Layer::MaxPool2d { window, stride } => {
                hp.window = Some(*window);
                hp.stride = Some(*stride);
            }
            Layer::Dropout { keep_prob } => hp.keep_prob = Some(*keep_prob),
            Layer::Relu | Layer::Flatten => {}
        }
        entries.push(LayerEntry {
            name: spec.name.clone(),
            kind: spec.kind().as_str().into(),
            hyperparams: hp,
            weight_blob: wb,
            bias_blob: bb,
            input_shape: Some(model.boundary_shape(l).to_vec()),
            output_shape: Some(model.boundary_shape(l + 1).to_vec()),
        });
    }
    let manifest = Manifest {
        format: FORMAT_MAGIC.into(),
        format_version: FORMAT_VERSION,
        input_shape: model.input_shape().to_vec(),
        class_labels: model.class_labels().map(<[String]>::to_vec),
        layers: entries,
    };
    (manifest, weights)
}

fn manifest_bytes(manifest: &Manifest) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    out.push(b'\n');
    out
}

/// Writes `model` as an archive directory.
pub fn save_model(model: &ModelGraph, dir: impl AsRef<Path>) -> Result<(), ModelError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (manifest, weights) = encode_model(model);
    let m = dir.join(MANIFEST_FILE);
    fs::write(&m, manifest_bytes(&manifest)).map_err(io_err(&m))?;
    let w = dir.join(WEIGHTS_FILE);
    fs::write(&w, weights).map_err(io_err(&w))?;
    Ok(())
}

/// Writes `model` as a zip archive (stored, uncompressed).
pub fn save_model_zip(model: &ModelGraph, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    let (manifest, weights) = encode_model(model);
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut zip = zip::ZipWriter::new(file);
    let opts = zip::write::SimpleFileOptions::default().compression_method(zip::CompressionMethod::Stored);
    let zerr = |e: zip::result::ZipError| ModelError::Zip(e.to_string());
    zip.start_file(MANIFEST_FILE, opts).map_err(zerr)?;
    zip.write_all(&manifest_bytes(&manifest)).map_err(io_err(path))?;
    zip.start_file(WEIGHTS_FILE, opts).map_err(zerr)?;
    zip.write_all(&weights).map_err(io_err(path))?;
    zip.finish().map_err(zerr)?;
    Ok(())
}

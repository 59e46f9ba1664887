//! On-disk formats: the weight directory, dataset manifests and PNG input.
//!
//! A weight directory holds `manifest.json` and `weights.bin`. The payload is
//! the concatenation of every tensor in [`tensor_layout`] order as
//! little-endian `f32`, row-major. The manifest lists each tensor's name,
//! shape and byte offset, the model configuration, the input normalization
//! and the SHA-256 of the payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::LabeledSample;
use crate::image::{ImageTensor, Normalization};
use crate::model::{tensor_layout, ModelConfig, ModelWeights};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorDescriptor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub normalization: Normalization,
    pub tensors: Vec<TensorDescriptor>,
    /// Hex SHA-256 of `weights.bin`.
    pub sha256: String,
}

impl WeightManifest {
    /// Checks version, configuration, the tensor list against the
    /// configuration's layout and offset contiguity. Returns the payload size.
    pub fn validate(&self) -> Result<usize> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported weight format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.config.validate()?;
        self.normalization.validate(self.config.channels)?;
        let layout = tensor_layout(&self.config);
        if layout.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "manifest lists {} tensors, configuration needs {}",
                self.tensors.len(),
                layout.len()
            )));
        }
        let mut offset = 0;
        for ((name, shape), d) in layout.iter().zip(&self.tensors) {
            if &d.name != name {
                return Err(Error::Shape(format!("expected tensor '{name}', found '{}'", d.name)));
            }
            if &d.shape != shape {
                return Err(Error::Shape(format!("tensor '{name}' has shape {:?}, expected {shape:?}", d.shape)));
            }
            if d.offset != offset {
                return Err(Error::Data(format!(
                    "tensor '{name}' at offset {}, expected contiguous offset {offset}",
                    d.offset
                )));
            }
            offset += 4 * shape.iter().product::<usize>();
        }
        Ok(offset)
    }
}

/// A model loaded from a weight directory.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedModel<T> {
    pub config: ModelConfig,
    pub normalization: Normalization,
    pub weights: ModelWeights<T>,
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Loads and verifies a weight directory. The checksum is checked before
/// any tensor is decoded.
pub fn load_weights(dir: &Path) -> Result<LoadedModel<f32>> {
    let manifest: WeightManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let expected_len = manifest.validate()?;
    let payload_path = dir.join(PAYLOAD_FILE);
    let payload = read_bytes(&payload_path)?;
    let found = sha256_hex(&payload);
    if !found.eq_ignore_ascii_case(&manifest.sha256) {
        return Err(Error::Checksum {
            path: payload_path,
            expected: manifest.sha256.clone(),
            found,
        });
    }
    if payload.len() != expected_len {
        return Err(Error::Data(format!(
            "payload has {} bytes, manifest describes {expected_len}",
            payload.len()
        )));
    }
    let tensors = manifest
        .tensors
        .iter()
        .map(|d| {
            let len: usize = d.shape.iter().product();
            let values = payload[d.offset..d.offset + 4 * len]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Tensor::new(d.shape.clone(), values)
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = ModelWeights::from_tensors(&manifest.config, tensors)?;
    weights.validate(&manifest.config)?;
    Ok(LoadedModel {
        config: manifest.config,
        normalization: manifest.normalization,
        weights,
    })
}

/// Writes a weight directory; values are stored as `f32`.
pub fn save_weights<T: Scalar>(
    dir: &Path,
    config: &ModelConfig,
    normalization: &Normalization,
    weights: &ModelWeights<T>,
) -> Result<WeightManifest> {
    config.validate()?;
    normalization.validate(config.channels)?;
    weights.validate(config)?;
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for ((name, shape), t) in tensor_layout(config).into_iter().zip(weights.tensors()) {
        tensors.push(TensorDescriptor {
            name,
            shape,
            offset: payload.len(),
        });
        for &v in t.data() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = WeightManifest {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        normalization: normalization.clone(),
        tensors,
        sha256: sha256_hex(&payload),
    };
    write_bytes(&dir.join(PAYLOAD_FILE), &payload)?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn default_class_names() -> Vec<String> {
    ["forward", "slow", "left", "right"].map(String::from).to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Image directory; relative roots resolve against the manifest's directory.
    pub root: PathBuf,
    pub entries: Vec<LabeledSample>,
    #[serde(default = "default_class_names")]
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.class_names.len() != num_classes {
            return Err(Error::Data(format!(
                "{} class names for a {num_classes}-class model",
                self.class_names.len()
            )));
        }
        for e in &self.entries {
            if e.label.len() != num_classes {
                return Err(Error::Data(format!(
                    "label of {} has {} entries, expected {num_classes}",
                    e.image.display(),
                    e.label.len()
                )));
            }
            if e.label.iter().any(|&b| b > 1) {
                return Err(Error::Data(format!("label of {} is not binary", e.image.display())));
            }
        }
        Ok(())
    }

    pub fn image_path(&self, entry: &LabeledSample) -> PathBuf {
        self.root.join(&entry.image)
    }
}

/// Reads a dataset manifest and resolves its root.
pub fn load_dataset(path: &Path) -> Result<DatasetManifest> {
    let mut manifest: DatasetManifest = read_json(path)?;
    if manifest.root.is_relative() {
        let base = path.parent().unwrap_or(Path::new(""));
        manifest.root = base.join(&manifest.root);
    }
    Ok(manifest)
}

/// Decodes a PNG whose size matches `cfg` and normalizes it.
pub fn load_png(path: &Path, cfg: &ModelConfig, normalization: &Normalization) -> Result<ImageTensor<f32>> {
    let bytes = read_bytes(path)?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    if (h, w) != (cfg.image_h, cfg.image_w) {
        return Err(Error::Data(format!(
            "{} is {w}×{h}, model expects {}×{}",
            path.display(),
            cfg.image_w,
            cfg.image_h
        )));
    }
    let pixels = match cfg.channels {
        1 => decoded.to_luma8().into_raw(),
        3 => decoded.to_rgb8().into_raw(),
        c => return Err(Error::Config(format!("PNG input supports 1 or 3 channels, not {c}"))),
    };
    ImageTensor::from_interleaved_u8(w, h, cfg.channels, &pixels, normalization.clone())
}

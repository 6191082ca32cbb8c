//! Binary container shared by checkpoints and persisted arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  b"TUPCONT\0"
//! manifest_len u32
//! manifest     JSON, manifest_len bytes
//! payload      tensors in manifest order, raw little-endian floats
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{Architecture, Classifier};
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TUPCONT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContentKind {
    Model,
    Array,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ContentKind,
    pub dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<Architecture>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub lineage: BTreeMap<String, String>,
}

impl Manifest {
    fn payload_len(&self) -> usize {
        self.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum::<usize>() * self.dtype.size_of()
    }
}

pub fn encode<T: Scalar>(manifest: &Manifest, tensors: &[&Tensor<T>]) -> Result<Vec<u8>> {
    if manifest.dtype != T::DTYPE {
        return Err(Error::Format(format!("manifest dtype {:?} but tensors are {:?}", manifest.dtype, T::DTYPE)));
    }
    let json = serde_json::to_vec(manifest)?;
    let mut out = Vec::with_capacity(12 + json.len() + manifest.payload_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

/// Parses the header and returns the manifest with the raw payload slice.
pub fn decode_header(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a tup container (bad magic header)".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::Format("manifest extends past end of file".into()))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Version { found: manifest.format_version, supported: FORMAT_VERSION });
    }
    Ok((manifest, &bytes[12 + len..]))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Manifest, Vec<Tensor<T>>)> {
    let (manifest, payload) = decode_header(bytes)?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::Format(format!("container holds {:?}, requested {:?}", manifest.dtype, T::DTYPE)));
    }
    let expected = manifest.payload_len();
    if payload.len() != expected {
        return Err(Error::PayloadLength { expected, found: payload.len() });
    }
    let width = T::DTYPE.size_of();
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let data: Vec<T> = payload[offset..offset + n * width].chunks_exact(width).map(T::read_le).collect();
        offset += n * width;
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
    }
    Ok((manifest, tensors))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn model_manifest<T: Scalar>(model: &Classifier<T>) -> Manifest {
    Manifest {
        format_version: FORMAT_VERSION,
        kind: ContentKind::Model,
        dtype: T::DTYPE,
        architecture: Some(model.architecture()),
        input_shape: Some(model.input_shape().to_vec()),
        num_classes: Some(model.num_classes()),
        tensors: model
            .parameter_specs()
            .into_iter()
            .map(|(name, shape)| TensorEntry { name, shape })
            .collect(),
        lineage: model.lineage.clone(),
    }
}

pub fn encode_model<T: Scalar>(model: &Classifier<T>) -> Result<Vec<u8>> {
    let params = model.parameters();
    let refs: Vec<&Tensor<T>> = params.iter().map(|(_, t)| t).collect();
    encode(&model_manifest(model), &refs)
}

/// SHA-256 of the model's checkpoint encoding.
pub fn model_hash<T: Scalar>(model: &Classifier<T>) -> String {
    sha256_hex(&encode_model(model).expect("model encodes"))
}

pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<Classifier<T>> {
    let (manifest, tensors) = decode::<T>(bytes)?;
    if manifest.kind != ContentKind::Model {
        return Err(Error::Format("container does not hold a model".into()));
    }
    let (arch, input_shape, classes) = match (manifest.architecture, &manifest.input_shape, manifest.num_classes) {
        (Some(a), Some(s), Some(k)) => (a, s.clone(), k),
        _ => return Err(Error::Format("model manifest lacks architecture, input_shape or num_classes".into())),
    };
    let mut model = Classifier::zeros(arch, &input_shape, classes)?;
    let names: Vec<String> = model.parameter_specs().into_iter().map(|(n, _)| n).collect();
    for (entry, name) in manifest.tensors.iter().zip(&names) {
        if &entry.name != name {
            return Err(Error::Format(format!("unexpected parameter `{}` (expected `{name}`)", entry.name)));
        }
    }
    model.set_parameters(&tensors)?;
    model.lineage = manifest.lineage;
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &Classifier<T>, path: &Path) -> Result<()> {
    write_file(path, &encode_model(model)?)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Classifier<T>> {
    decode_model(&read_file(path)?)
}

/// Storage precision of a container file, without decoding its payload.
pub fn peek_dtype(path: &Path) -> Result<Dtype> {
    let bytes = read_file(path)?;
    Ok(decode_header(&bytes)?.0.dtype)
}

pub fn save_array<T: Scalar>(tensor: &Tensor<T>, name: &str, lineage: BTreeMap<String, String>, path: &Path) -> Result<()> {
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: ContentKind::Array,
        dtype: T::DTYPE,
        architecture: None,
        input_shape: None,
        num_classes: None,
        tensors: vec![TensorEntry { name: name.to_string(), shape: tensor.shape().to_vec() }],
        lineage,
    };
    write_file(path, &encode(&manifest, &[tensor])?)
}

pub fn load_array<T: Scalar>(path: &Path) -> Result<(Manifest, Tensor<T>)> {
    let (manifest, mut tensors) = decode::<T>(&read_file(path)?)?;
    if manifest.kind != ContentKind::Array || tensors.len() != 1 {
        return Err(Error::Format("container does not hold a single array".into()));
    }
    Ok((manifest, tensors.remove(0)))
}

//! MXPT tensor container and model manifests.
//!
//! Byte layout, little-endian throughout:
//!
//! ```text
//! "MXPT" | version: u32 = 1 | header_len: u64 | header JSON (header_len bytes)
//!        | zero padding to an 8-byte boundary | payload
//! ```
//!
//! The header is a JSON object keyed by tensor name (sorted), each entry
//! `{"dtype":"f32"|"f64","shape":[rows,cols],"offset":o,"length":l}` with
//! offsets relative to the payload start. Tensors are laid out in name order,
//! each starting on an 8-byte boundary.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"MXPT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE_LEN: usize = 16;
const ALIGN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub value: Matrix,
}

/// Named tensors with their storage dtype. Names are kept sorted.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorContainer {
    tensors: BTreeMap<String, Tensor>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Collects `(name, tensor)` pairs, rejecting duplicate or empty names.
    pub fn from_tensors<I, S>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Tensor)>,
        S: Into<String>,
    {
        let mut c = Self::new();
        for (name, t) in items {
            c.insert(name, t.dtype, t.value)?;
        }
        Ok(c)
    }

    pub fn insert(&mut self, name: impl Into<String>, dtype: DType, value: Matrix) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Format("tensor name must be non-empty".into()));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        self.tensors.insert(name, Tensor { dtype, value });
        Ok(())
    }

    /// Replaces the value of an existing tensor, keeping its dtype.
    pub fn replace(&mut self, name: &str, value: Matrix) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(t) if t.value.shape() == value.shape() => {
                t.value = value;
                Ok(())
            }
            Some(t) => Err(Error::Shape(format!(
                "tensor `{name}` is {:?}, replacement is {:?}",
                t.value.shape(),
                value.shape()
            ))),
            None => Err(Error::Format(format!("no tensor named `{name}`"))),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn matrix(&self, name: &str) -> Option<&Matrix> {
        self.tensors.get(name).map(|t| &t.value)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        read_container(&fs::read(path)?)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, write_container(self))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[inline]
fn pad_to_align(n: usize) -> usize {
    (ALIGN - n % ALIGN) % ALIGN
}

/// Serializes a container. Output is canonical: the same tensor set always
/// yields the same bytes.
pub fn write_container(c: &TensorContainer) -> Vec<u8> {
    let mut header = BTreeMap::new();
    let mut offset = 0usize;
    for (name, t) in &c.tensors {
        offset += pad_to_align(offset);
        let length = t.value.len() * t.dtype.size();
        header.insert(
            name.as_str(),
            HeaderEntry {
                dtype: t.dtype,
                shape: vec![t.value.rows(), t.value.cols()],
                offset: offset as u64,
                length: length as u64,
            },
        );
        offset += length;
    }
    let json = serde_json::to_vec(&header).expect("header serializes");

    let mut out = Vec::with_capacity(PREAMBLE_LEN + json.len() + ALIGN + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(out.len() + pad_to_align(out.len()), 0);

    let payload_start = out.len();
    for t in c.tensors.values() {
        let pad = pad_to_align(out.len() - payload_start);
        out.resize(out.len() + pad, 0);
        match t.dtype {
            DType::F64 => t
                .value
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            DType::F32 => t
                .value
                .data()
                .iter()
                .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        }
    }
    out
}

pub fn read_container(bytes: &[u8]) -> Result<TensorContainer> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected MXPT".into()));
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(Error::Corruption("truncated preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(PREAMBLE_LEN))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Corruption("header extends past end of stream".into()))?;
    let header: BTreeMap<String, HeaderEntry> =
        serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end])
            .map_err(|e| Error::Format(format!("invalid header: {e}")))?;

    let payload_start = header_end + pad_to_align(header_end);
    if payload_start > bytes.len() {
        return Err(Error::Corruption("missing header padding".into()));
    }
    let payload = &bytes[payload_start..];

    let mut spans = Vec::with_capacity(header.len());
    let mut out = TensorContainer::new();
    for (name, e) in header {
        if e.shape.len() != 2 {
            return Err(Error::Format(format!(
                "tensor `{name}` has rank {}, only 2-D tensors are supported",
                e.shape.len()
            )));
        }
        let (rows, cols) = (e.shape[0], e.shape[1]);
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(e.dtype.size()))
            .ok_or_else(|| Error::Corruption(format!("tensor `{name}` shape overflows")))?;
        if e.length != expected as u64 {
            return Err(Error::Corruption(format!(
                "tensor `{name}` length {} does not match shape {:?} ({expected} bytes)",
                e.length, e.shape
            )));
        }
        if e.offset % ALIGN as u64 != 0 {
            return Err(Error::Corruption(format!(
                "tensor `{name}` offset {} is not 8-byte aligned",
                e.offset
            )));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .filter(|&end| end <= payload.len() as u64)
            .ok_or_else(|| {
                Error::Corruption(format!("tensor `{name}` extends past end of payload"))
            })?;
        let (start, end) = (e.offset as usize, end as usize);
        spans.push((start, end, name.clone()));

        let raw = &payload[start..end];
        let data: Vec<f64> = match e.dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
        };
        let value = Matrix::new(rows, cols, data)
            .map_err(|err| Error::Corruption(format!("tensor `{name}`: {err}")))?;
        out.insert(name, e.dtype, value)?;
    }

    // zero-length tensors occupy no bytes and cannot overlap
    spans.retain(|(s, e, _)| e > s);
    spans.sort();
    let mut furthest: Option<(usize, &str)> = None;
    for (start, end, name) in &spans {
        if let Some((prev_end, prev)) = furthest {
            if *start < prev_end {
                return Err(Error::Corruption(format!(
                    "tensors `{prev}` and `{name}` overlap"
                )));
            }
        }
        if furthest.is_none_or(|(e, _)| *end > e) {
            furthest = Some((*end, name));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    pub weight: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
    pub calib: String,
}

/// Layer list in topological order, stored as `{"layers": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub layers: Vec<LayerEntry>,
}

impl ModelManifest {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Validation {
            layer: "<manifest>".into(),
            reason: format!("invalid manifest JSON: {e}"),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerHandle {
    pub name: String,
    pub weight: String,
    pub bias: Option<String>,
    pub calib: String,
    pub d_out: usize,
    pub d_in: usize,
    pub n_samples: usize,
}

impl LayerHandle {
    pub fn param_count(&self) -> usize {
        self.d_out * self.d_in
    }
}

/// A manifest whose every reference has been resolved against the containers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidatedModel {
    pub layers: Vec<LayerHandle>,
}

/// Checks that every layer's tensors exist and agree on shapes. Weights and
/// biases resolve in `model`; calibration inputs in `calib`.
pub fn validate_manifest(
    manifest: &ModelManifest,
    model: &TensorContainer,
    calib: &TensorContainer,
) -> Result<ValidatedModel> {
    let fail = |layer: &str, reason: String| Error::Validation {
        layer: layer.to_string(),
        reason,
    };
    if manifest.layers.is_empty() {
        return Err(fail("<manifest>", "manifest lists no layers".into()));
    }
    let mut seen = BTreeSet::new();
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let name = entry.name.as_str();
        if !seen.insert(name) {
            return Err(fail(name, "duplicate layer name".into()));
        }
        let w = model
            .matrix(&entry.weight)
            .ok_or_else(|| fail(name, format!("weight tensor `{}` not found", entry.weight)))?;
        let x = calib.matrix(&entry.calib).ok_or_else(|| {
            fail(name, format!("calibration tensor `{}` not found", entry.calib))
        })?;
        let (d_out, d_in) = w.shape();
        if x.cols() != d_in {
            return Err(fail(
                name,
                format!(
                    "weight is {d_out}x{d_in} but calibration `{}` has {} columns",
                    entry.calib,
                    x.cols()
                ),
            ));
        }
        if let Some(b) = &entry.bias {
            let bias = model
                .matrix(b)
                .ok_or_else(|| fail(name, format!("bias tensor `{b}` not found")))?;
            if bias.len() != d_out || (bias.rows() != 1 && bias.cols() != 1) {
                return Err(fail(
                    name,
                    format!("bias `{b}` has shape {:?}, expected {d_out} values", bias.shape()),
                ));
            }
        }
        layers.push(LayerHandle {
            name: entry.name.clone(),
            weight: entry.weight.clone(),
            bias: entry.bias.clone(),
            calib: entry.calib.clone(),
            d_out,
            d_in,
            n_samples: x.rows(),
        });
    }
    Ok(ValidatedModel { layers })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, m: Matrix) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.insert(name, DType::F64, m).unwrap();
        c
    }

    #[test]
    fn empty_container_is_valid() {
        let bytes = write_container(&TensorContainer::new());
        assert_eq!(&bytes[..4], b"MXPT");
        assert_eq!(&bytes[16..18], b"{}");
        assert_eq!(bytes.len(), 24);
        assert!(read_container(&bytes).unwrap().is_empty());
    }

    #[test]
    fn two_by_two_payload_is_32_bytes() {
        let c = one("w", Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let bytes = write_container(&c);
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = (16 + header_len).div_ceil(8) * 8;
        assert_eq!(bytes.len() - payload_start, 32);
        assert_eq!(read_container(&bytes).unwrap(), c);
    }

    #[test]
    fn duplicate_and_empty_names_rejected() {
        let mut c = one("w", Matrix::identity(1));
        assert!(matches!(
            c.insert("w", DType::F64, Matrix::identity(1)),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            c.insert("", DType::F64, Matrix::identity(1)),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = write_container(&one("w", Matrix::identity(2)));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(read_container(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload() {
        let bytes = write_container(&one("w", Matrix::identity(2)));
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(read_container(cut), Err(Error::Corruption(_))));
    }

    #[test]
    fn unknown_version() {
        let mut bytes = write_container(&one("w", Matrix::identity(2)));
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(read_container(&bytes), Err(Error::Version(2))));
    }

    #[test]
    fn f32_is_widened_after_truncation() {
        let mut c = TensorContainer::new();
        c.insert("a", DType::F32, Matrix::from_rows(&[[0.1, 1.5, -3.0]]))
            .unwrap();
        let back = read_container(&write_container(&c)).unwrap();
        let got = back.matrix("a").unwrap();
        assert_eq!(got.get(0, 0), 0.1f32 as f64);
        assert_eq!(got.get(0, 1), 1.5);
        assert_eq!(back.get("a").unwrap().dtype, DType::F32);
    }

    #[test]
    fn odd_f32_tensor_keeps_next_offset_aligned() {
        let mut c = TensorContainer::new();
        c.insert("a", DType::F32, Matrix::from_rows(&[[1.0, 2.0, 3.0]]))
            .unwrap();
        c.insert("b", DType::F64, Matrix::from_rows(&[[4.0]])).unwrap();
        let bytes = write_container(&c);
        let hl = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hl]).unwrap();
        assert_eq!(header["b"]["offset"], 16);
        assert_eq!(read_container(&bytes).unwrap(), c);
    }

    fn manifest(calib: &str) -> ModelManifest {
        ModelManifest {
            layers: vec![LayerEntry {
                name: "fc".into(),
                weight: "fc.w".into(),
                bias: None,
                calib: calib.into(),
            }],
        }
    }

    #[test]
    fn manifest_shape_rules() {
        let model = one("fc.w", Matrix::zeros(4, 8));
        let mut calib = TensorContainer::new();
        calib.insert("x8", DType::F64, Matrix::zeros(5, 8)).unwrap();
        calib.insert("x7", DType::F64, Matrix::zeros(5, 7)).unwrap();

        let ok = validate_manifest(&manifest("x8"), &model, &calib).unwrap();
        assert_eq!(ok.layers[0].d_in, 8);
        assert_eq!(ok.layers[0].d_out, 4);
        assert_eq!(ok.layers[0].n_samples, 5);

        match validate_manifest(&manifest("x7"), &model, &calib) {
            Err(Error::Validation { layer, .. }) => assert_eq!(layer, "fc"),
            other => panic!("expected validation error, got {other:?}"),
        }
        assert!(matches!(
            validate_manifest(&manifest("missing"), &model, &calib),
            Err(Error::Validation { .. })
        ));
    }

    #[test]
    fn manifest_json_shape() {
        let json = r#"{"layers":[{"name":"fc","weight":"fc.w","bias":"fc.b","calib":"fc.x"}]}"#;
        let m = ModelManifest::from_json(json).unwrap();
        assert_eq!(m.layers[0].bias.as_deref(), Some("fc.b"));
        assert!(ModelManifest::from_json(r#"{"layers":[{"name":"a"}]}"#).is_err());
    }
}

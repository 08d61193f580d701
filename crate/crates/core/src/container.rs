//! `.nnrw` model containers: named f32 tensors plus a convolution-layer
//! manifest, with one canonical little-endian byte form.
//!
//! ```text
//! "NNRW" | u16 version | u32 tensor_count
//!   per tensor: u16 name_len | name | u8 dtype (0 = f32) | u8 rank | rank x u32 dims
//! u32 layer_count
//!   per layer:  u16 tensor index | u16 stride | u16 padding
//! raw f32 data, tensor-table order, no padding
//! ```
//!
//! The SHA-256 of exactly these bytes is the model digest used for sealing.

use std::collections::HashSet;
use std::fmt;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"NNRW";
pub const FORMAT_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ContainerError {
    #[error("bad magic, not an .nnrw container")]
    BadMagic,
    #[error("file truncated")]
    TruncatedFile,
    #[error("unsupported container version {0}")]
    VersionUnsupported(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("duplicate tensor name `{0}`")]
    DuplicateTensorName(String),
    #[error("layer {layer} references tensor #{index}, which does not exist")]
    ManifestDangling { layer: usize, index: usize },
    #[error("layer {layer} weight tensor `{name}` is not rank 4")]
    NotConvTensor { layer: usize, name: String },
    #[error("tensor `{name}`: shape holds {expected} elements but data has {actual}")]
    ShapeMismatch {
        name: String,
        expected: usize,
        actual: usize,
    },
    #[error("tensor `{0}` has a zero dimension or an oversized shape")]
    InvalidShape(String),
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("layer {0} has stride 0")]
    InvalidStride(usize),
    #[error("{0} does not fit the container's field width")]
    FieldOverflow(&'static str),
    #[error("{0} trailing bytes after tensor data")]
    TrailingBytes(usize),
}

/// A named tensor of binary32 weights, row-major.
#[derive(Clone, Debug)]
pub struct WeightTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl WeightTensor {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<Self, ContainerError> {
        let tensor = WeightTensor {
            name: name.into(),
            shape,
            data,
        };
        tensor.check_shape()?;
        Ok(tensor)
    }

    pub fn element_count(&self) -> Option<usize> {
        self.shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }

    fn check_shape(&self) -> Result<(), ContainerError> {
        if self.shape.contains(&0) {
            return Err(ContainerError::InvalidShape(self.name.clone()));
        }
        let expected = self
            .element_count()
            .ok_or_else(|| ContainerError::InvalidShape(self.name.clone()))?;
        if expected != self.data.len() {
            return Err(ContainerError::ShapeMismatch {
                name: self.name.clone(),
                expected,
                actual: self.data.len(),
            });
        }
        Ok(())
    }

    /// `(d, c_in, kh, kw)` for a rank-4 convolution weight.
    pub fn conv_dims(&self) -> Option<ConvDims> {
        match self.shape[..] {
            [d, c, kh, kw] => Some(ConvDims {
                out_channels: d,
                in_channels: c,
                kernel_h: kh,
                kernel_w: kw,
            }),
            _ => None,
        }
    }
}

// Equality is bit-level so NaN payloads and signed zeros compare as stored.
impl PartialEq for WeightTensor {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Eq for WeightTensor {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
}

impl ConvDims {
    /// Weights per output channel, `c_in * kh * kw`.
    pub fn per_channel(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn total(&self) -> usize {
        self.out_channels * self.per_channel()
    }
}

/// One convolution layer of the manifest. `layer_index` is the position in
/// the manifest; `weight_tensor` indexes the tensor table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub weight_tensor: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelContainer {
    pub version: u16,
    pub tensors: Vec<WeightTensor>,
    pub manifest: Vec<LayerSpec>,
}

impl Default for ModelContainer {
    fn default() -> Self {
        ModelContainer {
            version: FORMAT_VERSION,
            tensors: Vec::new(),
            manifest: Vec::new(),
        }
    }
}

impl ModelContainer {
    pub fn new(
        tensors: Vec<WeightTensor>,
        manifest: Vec<LayerSpec>,
    ) -> Result<Self, ContainerError> {
        let model = ModelContainer {
            version: FORMAT_VERSION,
            tensors,
            manifest,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), ContainerError> {
        if self.version != FORMAT_VERSION {
            return Err(ContainerError::VersionUnsupported(self.version));
        }
        let mut seen = HashSet::with_capacity(self.tensors.len());
        for t in &self.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(ContainerError::DuplicateTensorName(t.name.clone()));
            }
            t.check_shape()?;
        }
        for (layer, spec) in self.manifest.iter().enumerate() {
            let tensor = self
                .tensors
                .get(spec.weight_tensor)
                .ok_or(ContainerError::ManifestDangling {
                    layer,
                    index: spec.weight_tensor,
                })?;
            if tensor.shape.len() != 4 {
                return Err(ContainerError::NotConvTensor {
                    layer,
                    name: tensor.name.clone(),
                });
            }
            if spec.stride == 0 {
                return Err(ContainerError::InvalidStride(layer));
            }
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<&WeightTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn layer_tensor(&self, layer: usize) -> Option<&WeightTensor> {
        self.manifest
            .get(layer)
            .and_then(|spec| self.tensors.get(spec.weight_tensor))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ContainerError> {
        serialize_container(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        parse_container(bytes)
    }

    pub fn digest(&self) -> Result<ModelDigest, ContainerError> {
        model_digest(self)
    }
}

pub fn serialize_container(model: &ModelContainer) -> Result<Vec<u8>, ContainerError> {
    model.validate()?;
    let data_len: usize = model.tensors.iter().map(|t| t.data.len() * 4).sum();
    let mut out = Vec::with_capacity(64 + data_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&model.version.to_le_bytes());
    out.extend_from_slice(&u32_field(model.tensors.len(), "tensor count")?.to_le_bytes());
    for t in &model.tensors {
        let name = t.name.as_bytes();
        out.extend_from_slice(&u16_field(name.len(), "tensor name length")?.to_le_bytes());
        out.extend_from_slice(name);
        out.push(DTYPE_F32);
        out.push(u8::try_from(t.shape.len()).map_err(|_| ContainerError::FieldOverflow("rank"))?);
        for &dim in &t.shape {
            out.extend_from_slice(&u32_field(dim, "dimension")?.to_le_bytes());
        }
    }
    out.extend_from_slice(&u32_field(model.manifest.len(), "layer count")?.to_le_bytes());
    for spec in &model.manifest {
        out.extend_from_slice(&u16_field(spec.weight_tensor, "layer tensor index")?.to_le_bytes());
        out.extend_from_slice(&u16_field(spec.stride, "stride")?.to_le_bytes());
        out.extend_from_slice(&u16_field(spec.padding, "padding")?.to_le_bytes());
    }
    for t in &model.tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    Ok(out)
}

fn u16_field(v: usize, what: &'static str) -> Result<u16, ContainerError> {
    u16::try_from(v).map_err(|_| ContainerError::FieldOverflow(what))
}

fn u32_field(v: usize, what: &'static str) -> Result<u32, ContainerError> {
    u32::try_from(v).map_err(|_| ContainerError::FieldOverflow(what))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).ok_or(ContainerError::TruncatedFile)?;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or(ContainerError::TruncatedFile)?;
        self.pos = end;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ContainerError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn parse_container(bytes: &[u8]) -> Result<ModelContainer, ContainerError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4).map_err(|_| ContainerError::BadMagic)?;
    if magic != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let version = cur.u16()?;
    if version != FORMAT_VERSION {
        return Err(ContainerError::VersionUnsupported(version));
    }

    let tensor_count = cur.u32()? as usize;
    // Each table entry needs at least 4 bytes; reject absurd counts before allocating.
    if tensor_count > bytes.len() / 4 {
        return Err(ContainerError::TruncatedFile);
    }
    let mut headers = Vec::with_capacity(tensor_count);
    for _ in 0..tensor_count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| ContainerError::InvalidName)?
            .to_owned();
        let dtype = cur.u8()?;
        if dtype != DTYPE_F32 {
            return Err(ContainerError::UnsupportedDtype(dtype));
        }
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        headers.push((name, shape));
    }

    let layer_count = cur.u32()? as usize;
    if layer_count > bytes.len() / 6 {
        return Err(ContainerError::TruncatedFile);
    }
    let mut manifest = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let weight_tensor = cur.u16()? as usize;
        let stride = cur.u16()? as usize;
        let padding = cur.u16()? as usize;
        manifest.push(LayerSpec {
            weight_tensor,
            stride,
            padding,
        });
    }

    let mut tensors = Vec::with_capacity(tensor_count);
    for (name, shape) in headers {
        if shape.contains(&0) {
            return Err(ContainerError::InvalidShape(name));
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| ContainerError::InvalidShape(name.clone()))?;
        let raw = cur.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_bits(u32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        tensors.push(WeightTensor { name, shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(ContainerError::TrailingBytes(bytes.len() - cur.pos));
    }

    let model = ModelContainer {
        version,
        tensors,
        manifest,
    };
    model.validate()?;
    Ok(model)
}

/// SHA-256 over the canonical container bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelDigest(pub [u8; 32]);

impl ModelDigest {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        ModelDigest(Sha256::digest(bytes).into())
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The digest as 256 bits, most significant bit of byte 0 first.
    pub fn to_bits(&self) -> Vec<bool> {
        crate::bits::bytes_to_bits(&self.0)
    }

    pub fn from_bits(bits: &[bool]) -> Option<Self> {
        if bits.len() != 256 {
            return None;
        }
        let bytes = crate::bits::bits_to_bytes(bits);
        Some(ModelDigest(bytes.try_into().ok()?))
    }
}

impl fmt::Display for ModelDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for ModelDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ModelDigest({})", self.to_hex())
    }
}

pub fn model_digest(model: &ModelContainer) -> Result<ModelDigest, ContainerError> {
    Ok(ModelDigest::of_bytes(&serialize_container(model)?))
}

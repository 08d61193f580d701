//! Reversible watermarking of convolution weights.
//!
//! Two significant decimal digits of selected weights form an integer host
//! sequence; histogram shifting hides a payload in it, and the embedding
//! metadata rides in mantissa bit 0 of the layer. Extraction recovers the
//! payload and restores every weight bit for bit. Sealing embeds the
//! SHA-256 of the model itself, so any later modification is detected.

pub mod bits;
pub mod codec;
pub mod container;
pub mod decimal;
pub mod entropy;
pub mod hs;
pub mod payload;
pub mod protocol;
pub mod scorer;
pub mod sidecar;

pub use container::{
    model_digest, parse_container, serialize_container, ContainerError, ConvDims, LayerSpec,
    ModelContainer, ModelDigest, WeightTensor,
};
pub use protocol::{
    embed_watermark, extract_watermark, seal, verify, verify_bytes, EmbedConfig, LayerConfig,
    PairPosition, ProtocolError, Verdict, VerifyReport,
};

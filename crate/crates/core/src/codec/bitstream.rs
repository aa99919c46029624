//! Serialized compressed-image container.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! "CKBD" | u8 version | u8 parity | u8 precision | u16 packed(K|k|kind)
//!        | u32 width | u32 height | u8 channels | u64 weight digest
//!        | u64 len | z stream | u64 len | anchor stream | u64 len | non-anchor stream
//! ```
//!
//! `width`/`height` are the original (pre-padding) image dimensions. The
//! packed field holds the mixture size K in bits 0-3, the context kernel in
//! bits 4-8, and the context-kind code in bits 9-10.

use super::weights::Reader;
use super::{CodecError, ContextKind, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"CKBD";
pub const CONTAINER_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitstreamContainer {
    pub version: u8,
    pub parity: u8,
    pub precision: u8,
    pub gmm_components: u8,
    pub context_kernel: u8,
    pub context_kind: ContextKind,
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub weight_digest: u64,
    pub z_stream: Vec<u8>,
    pub anchor_stream: Vec<u8>,
    pub non_anchor_stream: Vec<u8>,
}

impl BitstreamContainer {
    pub fn packed(&self) -> u16 {
        (self.gmm_components as u16 & 0xF)
            | ((self.context_kernel as u16 & 0x1F) << 4)
            | ((self.context_kind.code() as u16 & 0x3) << 9)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            39 + self.z_stream.len() + self.anchor_stream.len() + self.non_anchor_stream.len(),
        );
        out.extend_from_slice(CONTAINER_MAGIC);
        out.push(self.version);
        out.push(self.parity);
        out.push(self.precision);
        out.extend_from_slice(&self.packed().to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.channels);
        out.extend_from_slice(&self.weight_digest.to_le_bytes());
        for stream in [&self.z_stream, &self.anchor_stream, &self.non_anchor_stream] {
            out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
            out.extend_from_slice(stream);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<BitstreamContainer> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CONTAINER_MAGIC {
            return Err(CodecError::Container {
                message: "not a compressed-image container (bad magic)".into(),
            });
        }
        let version = r.u8()?;
        if version != CONTAINER_VERSION {
            return Err(CodecError::Container {
                message: format!("unsupported container version {version}"),
            });
        }
        let parity = r.u8()?;
        let precision = r.u8()?;
        let packed = r.u16()?;
        let gmm_components = (packed & 0xF) as u8;
        let context_kernel = ((packed >> 4) & 0x1F) as u8;
        let kind_code = ((packed >> 9) & 0x3) as u8;
        let context_kind = ContextKind::from_code(kind_code).ok_or(CodecError::Container {
            message: format!("unknown context kind code {kind_code}"),
        })?;
        let width = r.u32()?;
        let height = r.u32()?;
        let channels = r.u8()?;
        let weight_digest = r.u64()?;
        let mut streams = [Vec::new(), Vec::new(), Vec::new()];
        for s in streams.iter_mut() {
            let len = r.u64()? as usize;
            if len > r.remaining() {
                return Err(CodecError::Container {
                    message: format!("stream length {len} exceeds remaining {} bytes", r.remaining()),
                });
            }
            *s = r.take(len)?.to_vec();
        }
        if r.remaining() != 0 {
            return Err(CodecError::Container {
                message: format!("{} trailing bytes after streams", r.remaining()),
            });
        }
        let [z_stream, anchor_stream, non_anchor_stream] = streams;
        Ok(BitstreamContainer {
            version,
            parity,
            precision,
            gmm_components,
            context_kernel,
            context_kind,
            width,
            height,
            channels,
            weight_digest,
            z_stream,
            anchor_stream,
            non_anchor_stream,
        })
    }

    /// Compressed payload size in bits (headers excluded).
    pub fn payload_bits(&self) -> u64 {
        8 * (self.z_stream.len() + self.anchor_stream.len() + self.non_anchor_stream.len()) as u64
    }

    /// Whole-file size in bits.
    pub fn total_bits(&self) -> u64 {
        8 * self.to_bytes().len() as u64
    }
}

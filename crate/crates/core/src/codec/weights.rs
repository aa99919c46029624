//! Model parameter storage, initialization, and the on-disk weights format.
//!
//! File layout (little-endian): magic "CKWT", u8 version, then the payload:
//! serialized config, u32 tensor count, and per tensor a length-prefixed
//! name, a 4 x u32 shape, and raw f32 data. The 64-bit FNV-1a digest of the
//! payload identifies the weight set inside bitstream headers.

use super::{CodecError, ContextKind, ModelConfig, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Shape, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"CKWT";
pub const WEIGHTS_VERSION: u8 = 1;

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
}

impl ParamTensor {
    pub fn tensor(&self) -> Tensor {
        Tensor::from_vec(self.shape, self.data.clone()).expect("stored shape matches data")
    }
}

/// All parameters of one codec model, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub tensors: Vec<ParamTensor>,
}

impl ModelWeights {
    /// Seeded He-style initialization. The sigma-producing output biases
    /// start at softplus^-1(1) so initial scales sit near 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
        config.validate()?;
        let mut rng = SplitMix64::new(seed);
        let mut tensors = Vec::new();
        for spec in super::net::layer_specs(config) {
            let [oc, ic, kh, kw] = spec.weight_shape;
            let fan_in = (ic * kh * kw) as f64;
            let std = (2.0 / fan_in).sqrt();
            let data: Vec<f32> = (0..oc * ic * kh * kw)
                .map(|_| (rng.normal() * std) as f32)
                .collect();
            tensors.push(ParamTensor {
                name: format!("{}.w", spec.name),
                shape: spec.weight_shape,
                data,
            });
            let mut bias = vec![0.0f32; oc];
            if spec.name == "ep.2" {
                // raw-sigma half of the output starts at softplus^-1(1)
                let m = config.latent_channels * config.gmm_components;
                for b in bias.iter_mut().take(2 * m).skip(m) {
                    *b = SOFTPLUS_INV_ONE;
                }
            }
            tensors.push(ParamTensor {
                name: format!("{}.b", spec.name),
                shape: [1, oc, 1, 1],
                data: bias,
            });
        }
        let n = config.n_channels;
        tensors.push(ParamTensor {
            name: "fp.mu".into(),
            shape: [1, n, 1, 1],
            data: vec![0.0; n],
        });
        tensors.push(ParamTensor {
            name: "fp.s".into(),
            shape: [1, n, 1, 1],
            data: vec![SOFTPLUS_INV_ONE; n],
        });
        Ok(ModelWeights {
            config: config.clone(),
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> &ParamTensor {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("missing parameter tensor {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ParamTensor {
        self.tensors
            .iter_mut()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("missing parameter tensor {name}"))
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    fn payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let c = &self.config;
        out.extend_from_slice(&(c.n_channels as u16).to_le_bytes());
        out.extend_from_slice(&(c.latent_channels as u16).to_le_bytes());
        out.push(c.gmm_components as u8);
        out.push(c.context_kernel as u8);
        out.push(c.context_kind.code());
        out.push(c.parity);
        out.extend_from_slice(&c.activation_slope.to_le_bytes());
        out.push(c.image_channels as u8);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            for d in t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.push(WEIGHTS_VERSION);
        out.extend_from_slice(&self.payload());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelWeights> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4)?;
        if magic != WEIGHTS_MAGIC {
            return Err(CodecError::Container {
                message: "not a weights file (bad magic)".into(),
            });
        }
        let version = r.u8()?;
        if version != WEIGHTS_VERSION {
            return Err(CodecError::Container {
                message: format!("unsupported weights version {version}"),
            });
        }
        let n_channels = r.u16()? as usize;
        let latent_channels = r.u16()? as usize;
        let gmm_components = r.u8()? as usize;
        let context_kernel = r.u8()? as usize;
        let kind_code = r.u8()?;
        let parity = r.u8()?;
        let activation_slope = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let image_channels = r.u8()? as usize;
        let context_kind = ContextKind::from_code(kind_code).ok_or(CodecError::Container {
            message: format!("unknown context kind code {kind_code}"),
        })?;
        let config = ModelConfig {
            n_channels,
            latent_channels,
            gmm_components,
            context_kernel,
            context_kind,
            parity,
            activation_slope,
            image_channels,
        };
        config.validate()?;
        let count = r.u32()? as usize;
        if count > 4096 {
            return Err(CodecError::Container {
                message: format!("implausible tensor count {count}"),
            });
        }
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| {
                CodecError::Container {
                    message: "tensor name is not utf-8".into(),
                }
            })?;
            let mut shape = [0usize; 4];
            for d in shape.iter_mut() {
                *d = r.u32()? as usize;
            }
            let numel: usize = shape.iter().product();
            if numel > 64 << 20 {
                return Err(CodecError::Container {
                    message: format!("implausible tensor size {numel}"),
                });
            }
            let raw = r.take(numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(ParamTensor { name, shape, data });
        }
        Ok(ModelWeights { config, tensors })
    }

    /// FNV-1a 64 over the serialized payload.
    pub fn digest(&self) -> u64 {
        fnv1a64(&self.payload())
    }
}

const SOFTPLUS_INV_ONE: f32 = 0.5413249; // softplus(x) = 1

pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CodecError::Container {
                message: format!("unexpected end of data at byte {}", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

//! The full compression pipeline: analysis/synthesis transforms, hyper
//! transforms, spatial context model and parameter network, with one-pass
//! encoding and two-pass parallel decoding for the checkerboard context, a
//! serial raster-order reference codec, and a context-free variant.

mod bitstream;
mod net;
mod pipeline;
mod weights;

pub use bitstream::BitstreamContainer;
pub use net::{
    analyze, bind_constants, bind_leaves, context_feature, factorized_prior, hyper_analyze,
    hyper_synthesize, layer_specs, param_network, phi_split, sigma_from_raw, sigma_scalar,
    synthesize, Bound, LayerSpec,
};
pub use pipeline::{
    decode_image, encode_image, entropy_params_anchor, entropy_params_nonanchor,
    entropy_params_one_pass, pad_to_multiple, quantize_latents, round_latents, unpad, CodecStats,
    DecodeOutput, DecodeStats, EncodeResult, PhiMaps, PhiQuantized, QuantizeMode,
};
pub use weights::{ModelWeights, ParamTensor};

use crate::coder::CoderError;
use crate::tensor::{Tensor, TensorError};

/// Which spatial context model the codec runs with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextKind {
    /// Hyperprior only; the parameter network sees a zero context feature.
    None,
    /// Raster-order causal context; sequential decode.
    Serial,
    /// Checkerboard context; one-pass encode, two-pass decode.
    Checkerboard,
}

impl ContextKind {
    pub fn code(self) -> u8 {
        match self {
            ContextKind::None => 0,
            ContextKind::Serial => 1,
            ContextKind::Checkerboard => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<ContextKind> {
        match code {
            0 => Some(ContextKind::None),
            1 => Some(ContextKind::Serial),
            2 => Some(ContextKind::Checkerboard),
            _ => None,
        }
    }
}

/// Architecture hyper-parameters. Desk-scale defaults; paper-scale channel
/// counts are accepted but untested at full size.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Transform width N.
    pub n_channels: usize,
    /// Latent channels M.
    pub latent_channels: usize,
    /// Mixture components K (1 = mean-scale Gaussian).
    pub gmm_components: usize,
    /// Context kernel size (3 or 5).
    pub context_kernel: usize,
    pub context_kind: ContextKind,
    /// Anchor parity convention byte (see `checkerboard`).
    pub parity: u8,
    /// Leaky ReLU negative slope.
    pub activation_slope: f32,
    /// Image channels (1 = grayscale, 3 = RGB).
    pub image_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_channels: 32,
            latent_channels: 48,
            gmm_components: 1,
            context_kernel: 5,
            context_kind: ContextKind::Checkerboard,
            parity: crate::checkerboard::PARITY_CONVENTION,
            activation_slope: 0.01,
            image_channels: 1,
        }
    }
}

impl ModelConfig {
    /// A small configuration for fast tests and gradient checks.
    pub fn tiny(context_kind: ContextKind) -> Self {
        ModelConfig {
            n_channels: 8,
            latent_channels: 8,
            context_kind,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_channels < 8 || self.n_channels % 4 != 0 {
            return Err(CodecError::Config {
                message: format!(
                    "n_channels must be a multiple of 4 and >= 8, got {}",
                    self.n_channels
                ),
            });
        }
        if self.latent_channels == 0 {
            return Err(CodecError::Config {
                message: "latent_channels must be positive".into(),
            });
        }
        if self.context_kernel % 2 == 0 || self.context_kernel < 3 || self.context_kernel > 31 {
            return Err(CodecError::Config {
                message: format!("context kernel must be odd in [3, 31], got {}", self.context_kernel),
            });
        }
        if self.gmm_components == 0 || self.gmm_components > 15 {
            return Err(CodecError::Config {
                message: format!("gmm components must be in [1, 15], got {}", self.gmm_components),
            });
        }
        if self.parity != crate::checkerboard::PARITY_CONVENTION {
            return Err(CodecError::Config {
                message: format!("unsupported parity convention {}", self.parity),
            });
        }
        if !(0.0..1.0).contains(&self.activation_slope) {
            return Err(CodecError::Config {
                message: format!("activation slope must be in [0, 1), got {}", self.activation_slope),
            });
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            return Err(CodecError::Config {
                message: format!("image channels must be 1 or 3, got {}", self.image_channels),
            });
        }
        Ok(())
    }

    /// Total downsampling factor from image to latent grid.
    pub fn latent_stride(&self) -> usize {
        16
    }

    /// Total downsampling factor from image to hyper-latent grid.
    pub fn hyper_stride(&self) -> usize {
        64
    }

    /// Channels emitted by the parameter network: (mu, sigma) per latent
    /// channel per component, plus K shared mixture-weight logits when K > 1.
    pub fn ep_out_channels(&self) -> usize {
        let k = self.gmm_components;
        2 * self.latent_channels * k + if k > 1 { k } else { 0 }
    }
}

#[derive(Debug)]
pub enum CodecError {
    Config { message: String },
    Tensor(TensorError),
    Coder(CoderError),
    /// Malformed or foreign container bytes.
    Container { message: String },
    /// Container was produced by a different weight set.
    DigestMismatch { expected: u64, found: u64 },
}

impl std::fmt::Display for CodecError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CodecError::Config { message } => write!(f, "config: {message}"),
            CodecError::Tensor(e) => write!(f, "{e}"),
            CodecError::Coder(e) => write!(f, "{e}"),
            CodecError::Container { message } => write!(f, "container: {message}"),
            CodecError::DigestMismatch { expected, found } => write!(
                f,
                "weight digest mismatch: container needs {expected:016x}, loaded model is {found:016x}"
            ),
        }
    }
}

impl std::error::Error for CodecError {}

impl From<TensorError> for CodecError {
    fn from(e: TensorError) -> Self {
        CodecError::Tensor(e)
    }
}

impl From<CoderError> for CodecError {
    fn from(e: CoderError) -> Self {
        CodecError::Coder(e)
    }
}

pub type Result<T> = std::result::Result<T, CodecError>;

/// Rate-distortion objective on plain values: mean bits per pixel plus
/// lambda times the MSE of [0,1]-scaled intensities.
pub fn rd_loss(x: &Tensor, x_hat: &Tensor, bits_y: f64, bits_z: f64, lambda: f64) -> f64 {
    let [n, _, h, w] = x.shape();
    let num_pixels = (n * h * w) as f64;
    (bits_y + bits_z) / num_pixels + lambda * crate::trainer::mse(x, x_hat)
}

//! Encode and decode pipelines.
//!
//! Encoding always computes entropy parameters in one pass. For the
//! checkerboard context this is the reparameterized form: feed latents with
//! non-anchors zeroed through the masked convolution, subtract the
//! anchor-restricted bias map (which zeroes the context feature at every
//! anchor exactly), and run the parameter network once over the whole grid.
//!
//! Checkerboard decoding runs two parameter passes: anchors from the
//! hyperprior alone (zero context), then non-anchors from the decoded
//! anchors. Both passes evaluate the parameter network only at the
//! positions they decode, via a gather + matrix-multiply path whose
//! per-element arithmetic is identical to the encoder's full-grid
//! convolutions, so encoder and decoder agree bitwise after parameter
//! quantization.
//!
//! The serial reference decoder walks the latent grid in raster order,
//! cropping the visible neighbourhood to a k x k window per step.

use std::time::Instant;

use super::net::{self, Bound};
use super::{BitstreamContainer, CodecError, ContextKind, ModelConfig, ModelWeights, Result};
use crate::checkerboard::{self, is_anchor, make_mask, MaskKind};
use crate::coder::{RangeDecoder, RangeEncoder};
use crate::entropy::{
    self, gaussian_bits, gmm_cdf_table, quantize_gmm_params, quantize_params, CdfTable,
    QuantizedGaussian, QuantizedGmm, ScaleTable, TableCache, PRECISION_BITS, SYMBOL_MAX,
    SYMBOL_MIN,
};
use crate::rng::SplitMix64;
use crate::tensor::{Shape, Tape, Tensor};

// ---------------------------------------------------------------- padding

/// Replicate-pad spatial dims up to the next multiple of `multiple`.
pub fn pad_to_multiple(x: &Tensor, multiple: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if ph == h && pw == w {
        return x.detach();
    }
    let mut data = vec![0.0f32; n * c * ph * pw];
    for img in 0..n * c {
        let src = &x.data()[img * h * w..][..h * w];
        let dst = &mut data[img * ph * pw..][..ph * pw];
        for r in 0..ph {
            let sr = r.min(h - 1);
            for col in 0..pw {
                let sc = col.min(w - 1);
                dst[r * pw + col] = src[sr * w + sc];
            }
        }
    }
    Tensor::with_node([n, c, ph, pw], data, None)
}

/// Crop back to the original spatial dims (top-left corner).
pub fn unpad(x: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, ph, pw] = x.shape();
    if ph == h && pw == w {
        return x.detach();
    }
    let mut data = vec![0.0f32; n * c * h * w];
    for img in 0..n * c {
        let src = &x.data()[img * ph * pw..][..ph * pw];
        let dst = &mut data[img * h * w..][..h * w];
        for r in 0..h {
            dst[r * w..][..w].copy_from_slice(&src[r * pw..][..w]);
        }
    }
    Tensor::with_node([n, c, h, w], data, None)
}

// ----------------------------------------------------------- quantization

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantizeMode {
    /// Nearest integer, half away from zero, saturated to the symbol range.
    Round,
    /// Additive uniform noise in (-1/2, 1/2); training only.
    Noise,
}

/// Quantize latents. `Round` detaches from the tape (hard quantization is
/// not differentiated); `Noise` records a differentiable add of a seeded
/// noise draw.
pub fn quantize_latents(
    tape: &mut Tape,
    y: &Tensor,
    mode: QuantizeMode,
    rng: Option<&mut SplitMix64>,
) -> crate::tensor::Result<Tensor> {
    match mode {
        QuantizeMode::Round => Ok(round_latents(y).0),
        QuantizeMode::Noise => {
            let rng = rng.ok_or(crate::tensor::TensorError::Contract {
                context: "quantize_latents",
                message: "noise mode requires a seeded generator".into(),
            })?;
            let noise: Vec<f32> = (0..y.numel())
                .map(|_| (rng.next_f64() - 0.5) as f32)
                .collect();
            let noise = Tensor::with_node(y.shape(), noise, None);
            tape.add(y, &noise)
        }
    }
}

/// Round with saturation; returns the rounded tensor and how many values
/// fell outside the symbol range.
pub fn round_latents(y: &Tensor) -> (Tensor, usize) {
    let mut saturated = 0usize;
    let data: Vec<f32> = y
        .data()
        .iter()
        .map(|&v| {
            let r = v.round();
            if r < SYMBOL_MIN as f32 || r > SYMBOL_MAX as f32 {
                saturated += 1;
                r.clamp(SYMBOL_MIN as f32, SYMBOL_MAX as f32)
            } else {
                r
            }
        })
        .collect();
    (Tensor::with_node(y.shape(), data, None), saturated)
}

fn to_symbols(t: &Tensor) -> Vec<i32> {
    t.data().iter().map(|&v| v as i32).collect()
}

// ------------------------------------------------------------ phi extraction

/// Per-element continuous entropy parameters extracted from a phi tensor
/// (batch 1), in channel-major element order.
pub enum PhiMaps {
    Gaussian { mu: Vec<f32>, sigma: Vec<f32> },
    Gmm { components: Vec<Vec<(f32, f32, f32)>> },
}

/// Quantized per-element coding parameters.
pub enum PhiQuantized {
    Gaussian(Vec<QuantizedGaussian>),
    Gmm(Vec<QuantizedGmm>),
}

impl PhiMaps {
    /// Extract (mu, sigma) (or mixture triples) for every latent element
    /// from the raw parameter-network output.
    pub fn from_phi(phi: &Tensor, cfg: &ModelConfig) -> PhiMaps {
        let [n, pc, h, w] = phi.shape();
        debug_assert_eq!(n, 1);
        debug_assert_eq!(pc, cfg.ep_out_channels());
        let m = cfg.latent_channels;
        let k = cfg.gmm_components;
        let plane = h * w;
        let d = phi.data();
        if k == 1 {
            let mut mu = Vec::with_capacity(m * plane);
            let mut sigma = Vec::with_capacity(m * plane);
            for c in 0..m {
                for p in 0..plane {
                    mu.push(d[c * plane + p]);
                    sigma.push(net::sigma_scalar(d[(m + c) * plane + p]));
                }
            }
            PhiMaps::Gaussian { mu, sigma }
        } else {
            // layout: [0, MK) mu, [MK, 2MK) raw sigma, [2MK, 2MK+K) pi logits
            let mut components = Vec::with_capacity(m * plane);
            for c in 0..m {
                for p in 0..plane {
                    let mut weights = Vec::with_capacity(k);
                    let mut total = 0.0f32;
                    for j in 0..k {
                        let wj = crate::tensor::softplus_scalar(d[(2 * m * k + j) * plane + p])
                            + 1e-3;
                        total += wj;
                        weights.push(wj);
                    }
                    let comps: Vec<(f32, f32, f32)> = (0..k)
                        .map(|j| {
                            (
                                weights[j] / total,
                                d[(j * m + c) * plane + p],
                                net::sigma_scalar(d[(m * k + j * m + c) * plane + p]),
                            )
                        })
                        .collect();
                    components.push(comps);
                }
            }
            PhiMaps::Gmm { components }
        }
    }

    pub fn len(&self) -> usize {
        match self {
            PhiMaps::Gaussian { mu, .. } => mu.len(),
            PhiMaps::Gmm { components } => components.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn quantized(&self, scale: &ScaleTable) -> PhiQuantized {
        match self {
            PhiMaps::Gaussian { mu, sigma } => PhiQuantized::Gaussian(
                mu.iter()
                    .zip(sigma.iter())
                    .map(|(&m, &s)| quantize_params(m, s, scale))
                    .collect(),
            ),
            PhiMaps::Gmm { components } => PhiQuantized::Gmm(
                components
                    .iter()
                    .map(|c| quantize_gmm_params(c, scale))
                    .collect(),
            ),
        }
    }

    /// Estimated bits for a symbol under the continuous parameters.
    fn element_bits(&self, idx: usize, sym: i32) -> f64 {
        match self {
            PhiMaps::Gaussian { mu, sigma } => {
                gaussian_bits(mu[idx] as f64, sigma[idx] as f64, sym as f64)
            }
            PhiMaps::Gmm { components } => {
                let mut p = 0.0f64;
                for &(pi, mu, sigma) in &components[idx] {
                    let sigma = (sigma as f64).max(entropy::SIGMA_MIN);
                    let up = crate::gauss::normal_cdf((sym as f64 + 0.5 - mu as f64) / sigma);
                    let lo = crate::gauss::normal_cdf((sym as f64 - 0.5 - mu as f64) / sigma);
                    p += pi as f64 * (up - lo);
                }
                -(p.max(entropy::MIN_LIKELIHOOD)).log2()
            }
        }
    }
}

impl PhiQuantized {
    pub fn len(&self) -> usize {
        match self {
            PhiQuantized::Gaussian(v) => v.len(),
            PhiQuantized::Gmm(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Equality of the parameters actually used for coding, across possibly
    /// different element orderings.
    pub fn same_at(&self, i: usize, other: &PhiQuantized, j: usize) -> bool {
        match (self, other) {
            (PhiQuantized::Gaussian(a), PhiQuantized::Gaussian(b)) => a[i] == b[j],
            (PhiQuantized::Gmm(a), PhiQuantized::Gmm(b)) => a[i] == b[j],
            _ => false,
        }
    }
}

// ----------------------------------------------------------- entropy params

/// One-pass entropy parameters for the checkerboard codec: valid at every
/// position (anchors see a zero context feature by the bias identity).
pub fn entropy_params_one_pass(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    hyper: &Tensor,
    y_hat: &Tensor,
) -> Result<Tensor> {
    if cfg.context_kind != ContextKind::Checkerboard {
        return Err(CodecError::Config {
            message: "one-pass entropy parameters exist only for the checkerboard context".into(),
        });
    }
    let mask = make_mask(MaskKind::Checkerboard, cfg.context_kernel)?;
    let zeros = Tensor::zeros(y_hat.shape());
    let y_half = tape.mux(y_hat, &zeros)?;
    let ctx = net::context_feature(tape, bound, cfg, &y_half, &mask)?;
    let b_half = b_half_batched(&bound.t("cm.b").data()[..], &ctx.shape());
    let ctx_centered = tape.sub(&ctx, &b_half)?;
    net::param_network(tape, bound, cfg, hyper, &ctx_centered)
}

/// Anchor-pass parameters: hyper feature with a zero context. Only anchor
/// positions of the result are meaningful.
pub fn entropy_params_anchor(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    hyper: &Tensor,
) -> Result<Tensor> {
    let m = cfg.latent_channels;
    let [n, _, h, w] = hyper.shape();
    let ctx = Tensor::zeros([n, 2 * m, h, w]);
    net::param_network(tape, bound, cfg, hyper, &ctx)
}

/// Non-anchor-pass parameters from decoded anchors (non-anchor positions of
/// `y_anchors` must be zero). Only non-anchor outputs are meaningful.
pub fn entropy_params_nonanchor(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    hyper: &Tensor,
    y_anchors: &Tensor,
) -> Result<Tensor> {
    let mask = make_mask(MaskKind::Checkerboard, cfg.context_kernel)?;
    let ctx = net::context_feature(tape, bound, cfg, y_anchors, &mask)?;
    net::param_network(tape, bound, cfg, hyper, &ctx)
}

fn b_half_batched(bias: &[f32], shape: &Shape) -> Tensor {
    let [n, c, h, w] = *shape;
    debug_assert_eq!(c, bias.len());
    let one = checkerboard::make_b_half(bias, h, w);
    if n == 1 {
        return one;
    }
    let mut data = Vec::with_capacity(n * c * h * w);
    for _ in 0..n {
        data.extend_from_slice(one.data());
    }
    Tensor::with_node(*shape, data, None)
}

// ------------------------------------------------------------- scan orders

/// Channel-major scan of one parity class: for c, for row, for col.
fn parity_scan(c: usize, h: usize, w: usize, anchors: bool) -> Vec<usize> {
    let mut idx = Vec::with_capacity(c * h * w / 2 + c);
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                if is_anchor(r, col) == anchors {
                    idx.push((ch * h + r) * w + col);
                }
            }
        }
    }
    idx
}

/// Spatial position list (row-major) of one parity class.
fn parity_positions(h: usize, w: usize, anchors: bool) -> Vec<usize> {
    let mut v = Vec::with_capacity(h * w / 2 + 1);
    for r in 0..h {
        for col in 0..w {
            if is_anchor(r, col) == anchors {
                v.push(r * w + col);
            }
        }
    }
    v
}

// -------------------------------------------------------------- gathered ep

/// Evaluate the three-layer pointwise parameter network at a subset of
/// spatial positions. `hyper` and `ctx` are full-grid channel-major planes;
/// a missing `ctx` means a zero context feature. Output is row-major
/// [ep_out][n_pos]. The per-element accumulation order matches the full-grid
/// convolution exactly.
fn ep_gathered(
    w: &ModelWeights,
    cfg: &ModelConfig,
    hyper: &Tensor,
    ctx: Option<&Tensor>,
    positions: &[usize],
) -> Vec<f32> {
    let m = cfg.latent_channels;
    let [_, hc, h, wd] = hyper.shape();
    debug_assert_eq!(hc, 2 * m);
    let plane = h * wd;
    let n = positions.len();
    let in_c = 4 * m;
    // gather input columns
    let mut x = vec![0.0f32; in_c * n];
    for c in 0..2 * m {
        let src = &hyper.data()[c * plane..][..plane];
        let dst = &mut x[c * n..][..n];
        for (j, &p) in positions.iter().enumerate() {
            dst[j] = src[p];
        }
    }
    if let Some(ctx) = ctx {
        for c in 0..2 * m {
            let src = &ctx.data()[c * plane..][..plane];
            let dst = &mut x[(2 * m + c) * n..][..n];
            for (j, &p) in positions.iter().enumerate() {
                dst[j] = src[p];
            }
        }
    }
    let slope = cfg.activation_slope;
    let l0 = linear_rows(&w.get("ep.0.w").data, &w.get("ep.0.b").data, &x, 4 * m, in_c, n);
    let a0 = leaky_inplace(l0, slope);
    let l1 = linear_rows(&w.get("ep.1.w").data, &w.get("ep.1.b").data, &a0, 3 * m, 4 * m, n);
    let a1 = leaky_inplace(l1, slope);
    linear_rows(
        &w.get("ep.2.w").data,
        &w.get("ep.2.b").data,
        &a1,
        cfg.ep_out_channels(),
        3 * m,
        n,
    )
}

/// Y[oc][j] = bias[oc] + sum_ic W[oc][ic] * X[ic][j], accumulated in
/// ascending ic order per element (bit-identical to the 1x1 conv kernel).
fn linear_rows(w: &[f32], bias: &[f32], x: &[f32], out_c: usize, in_c: usize, n: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; out_c * n];
    if n == 0 {
        return y;
    }
    crate::par::for_each_chunk(&mut y, n, out_c * in_c * n, |oc, row| {
        let bias_v = bias[oc];
        for v in row.iter_mut() {
            *v = bias_v;
        }
        let wrow = &w[oc * in_c..][..in_c];
        for (ic, &wv) in wrow.iter().enumerate() {
            let xrow = &x[ic * n..][..n];
            for (d, s) in row.iter_mut().zip(xrow.iter()) {
                *d += wv * *s;
            }
        }
    });
    y
}

fn leaky_inplace(mut v: Vec<f32>, slope: f32) -> Vec<f32> {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x *= slope;
        }
    }
    v
}

/// Quantize a gathered phi matrix ([ep_out][n_pos]) into per-position coding
/// parameters for each latent channel: result[(c, j)] in channel-major order.
fn quantize_gathered(
    phi: &[f32],
    cfg: &ModelConfig,
    n: usize,
    scale: &ScaleTable,
) -> PhiQuantized {
    let m = cfg.latent_channels;
    let k = cfg.gmm_components;
    if k == 1 {
        let mut out = Vec::with_capacity(m * n);
        for c in 0..m {
            for j in 0..n {
                let mu = phi[c * n + j];
                let sigma = net::sigma_scalar(phi[(m + c) * n + j]);
                out.push(quantize_params(mu, sigma, scale));
            }
        }
        PhiQuantized::Gaussian(out)
    } else {
        let mut out = Vec::with_capacity(m * n);
        for c in 0..m {
            for j in 0..n {
                let mut weights = Vec::with_capacity(k);
                let mut total = 0.0f32;
                for t in 0..k {
                    let wj =
                        crate::tensor::softplus_scalar(phi[(2 * m * k + t) * n + j]) + 1e-3;
                    total += wj;
                    weights.push(wj);
                }
                let comps: Vec<(f32, f32, f32)> = (0..k)
                    .map(|t| {
                        (
                            weights[t] / total,
                            phi[(t * m + c) * n + j],
                            net::sigma_scalar(phi[(m * k + t * m + c) * n + j]),
                        )
                    })
                    .collect();
                out.push(quantize_gmm_params(&comps, scale));
            }
        }
        PhiQuantized::Gmm(out)
    }
}

// ------------------------------------------------------------------ encode

#[derive(Clone, Debug, Default)]
pub struct CodecStats {
    /// Code length implied by the integer tables (what the coder targets).
    pub bits_y_table: f64,
    pub bits_z_table: f64,
    /// Entropy estimate under the continuous (pre-snap) parameters.
    pub bits_y_estimate: f64,
    pub bits_z_estimate: f64,
    /// Latents clamped into the symbol range.
    pub saturated: usize,
}

pub struct EncodeResult {
    pub container: BitstreamContainer,
    /// Encoder-side reconstruction (decode must reproduce it exactly).
    pub x_hat: Tensor,
    /// Quantized latents on the padded grid.
    pub y_hat: Tensor,
    pub z_hat: Tensor,
    pub stats: CodecStats,
}

struct SymbolCoder<'a> {
    tables: TableCache,
    scale: &'a ScaleTable,
}

impl<'a> SymbolCoder<'a> {
    fn table_at(&mut self, q: &PhiQuantized, idx: usize) -> std::sync::Arc<CdfTable> {
        match q {
            PhiQuantized::Gaussian(v) => self.tables.get(v[idx], self.scale),
            PhiQuantized::Gmm(v) => std::sync::Arc::new(gmm_cdf_table(&v[idx], self.scale)),
        }
    }
}

/// Compress one image tensor ([1, C, H, W], values in [0, 1]).
pub fn encode_image(x: &Tensor, w: &ModelWeights) -> Result<EncodeResult> {
    let cfg = &w.config;
    cfg.validate()?;
    let [n, c, h0, w0] = x.shape();
    if n != 1 || c != cfg.image_channels || h0 == 0 || w0 == 0 {
        return Err(CodecError::Config {
            message: format!(
                "expected [1, {}, H>0, W>0] input, got {:?}",
                cfg.image_channels,
                x.shape()
            ),
        });
    }
    let x_pad = pad_to_multiple(x, cfg.hyper_stride());
    let bound = net::bind_constants(w);
    let mut tape = Tape::no_grad();

    let y = net::analyze(&mut tape, &bound, cfg, &x_pad)?;
    let (y_hat, sat_y) = round_latents(&y);
    let z = net::hyper_analyze(&mut tape, &bound, cfg, &y)?;
    let (z_hat, sat_z) = round_latents(&z);

    let mut stats = CodecStats {
        saturated: sat_y + sat_z,
        ..CodecStats::default()
    };

    // hyper latent under the factorized prior
    let scale = ScaleTable::new();
    let prior = net::factorized_prior(w);
    let z_syms = to_symbols(&z_hat);
    let [_, zc, zh, zw] = z_hat.shape();
    let z_plane = zh * zw;
    let mut z_enc = RangeEncoder::new();
    {
        let mut cache = TableCache::new();
        for ch in 0..zc {
            let q = quantize_params(prior.mu[ch] as f32, prior.sigma[ch] as f32, &scale);
            let table = cache.get(q, &scale);
            for p in 0..z_plane {
                let s = z_syms[ch * z_plane + p];
                z_enc.encode(&table, s)?;
                stats.bits_z_table += table.bits(s);
                stats.bits_z_estimate += gaussian_bits(prior.mu[ch], prior.sigma[ch], s as f64);
            }
        }
    }
    let z_stream = z_enc.finish();

    // entropy parameters for the latents, one pass
    let hyper = net::hyper_synthesize(&mut tape, &bound, cfg, &z_hat)?;
    let phi = match cfg.context_kind {
        ContextKind::Checkerboard => {
            entropy_params_one_pass(&mut tape, &bound, cfg, &hyper, &y_hat)?
        }
        ContextKind::Serial => {
            let mask = make_mask(MaskKind::Serial, cfg.context_kernel)?;
            let ctx = net::context_feature(&mut tape, &bound, cfg, &y_hat, &mask)?;
            net::param_network(&mut tape, &bound, cfg, &hyper, &ctx)?
        }
        ContextKind::None => entropy_params_anchor(&mut tape, &bound, cfg, &hyper)?,
    };
    let maps = PhiMaps::from_phi(&phi, cfg);
    let q = maps.quantized(&scale);
    let y_syms = to_symbols(&y_hat);
    let [_, m, yh, yw] = y_hat.shape();

    let mut coder = SymbolCoder {
        tables: TableCache::new(),
        scale: &scale,
    };
    let mut encode_run = |order: &[usize]| -> Result<Vec<u8>> {
        let mut enc = RangeEncoder::new();
        for &idx in order {
            let table = coder.table_at(&q, idx);
            let s = y_syms[idx];
            enc.encode(&table, s)?;
            stats.bits_y_table += table.bits(s);
            stats.bits_y_estimate += maps.element_bits(idx, s);
        }
        Ok(enc.finish())
    };

    let (anchor_stream, non_anchor_stream) = match cfg.context_kind {
        ContextKind::Checkerboard => {
            let a = encode_run(&parity_scan(m, yh, yw, true))?;
            let na = encode_run(&parity_scan(m, yh, yw, false))?;
            (a, na)
        }
        ContextKind::Serial => {
            // raster positions, channels innermost
            let mut order = Vec::with_capacity(m * yh * yw);
            for r in 0..yh {
                for col in 0..yw {
                    for ch in 0..m {
                        order.push((ch * yh + r) * yw + col);
                    }
                }
            }
            (encode_run(&order)?, Vec::new())
        }
        ContextKind::None => {
            let order: Vec<usize> = (0..m * yh * yw).collect();
            (encode_run(&order)?, Vec::new())
        }
    };

    let x_hat_pad = net::synthesize(&mut tape, &bound, cfg, &y_hat)?;
    let x_hat = unpad(&x_hat_pad, h0, w0);

    let container = BitstreamContainer {
        version: super::bitstream::CONTAINER_VERSION,
        parity: cfg.parity,
        precision: PRECISION_BITS,
        gmm_components: cfg.gmm_components as u8,
        context_kernel: cfg.context_kernel as u8,
        context_kind: cfg.context_kind,
        width: w0 as u32,
        height: h0 as u32,
        channels: cfg.image_channels as u8,
        weight_digest: w.digest(),
        z_stream,
        anchor_stream,
        non_anchor_stream,
    };
    Ok(EncodeResult {
        container,
        x_hat,
        y_hat,
        z_hat,
        stats,
    })
}

// ------------------------------------------------------------------ decode

/// Instrumentation from one decode: parameter-pass counters and per-phase
/// wall time.
#[derive(Clone, Debug, Default)]
pub struct DecodeStats {
    /// Parameter-network invocations (2 for checkerboard, H*W for serial,
    /// 1 without context).
    pub gep_passes: u64,
    /// Context-feature constructions, counting the zero-context anchor pass.
    pub gcm_passes: u64,
    pub hyper_synthesis_ms: f64,
    pub parameter_calculation_ms: f64,
    pub latent_synthesis_ms: f64,
    /// Table construction and range decoding.
    pub entropy_decode_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug)]
pub struct DecodeOutput {
    pub x_hat: Tensor,
    pub y_hat: Tensor,
    pub z_hat: Tensor,
    pub stats: DecodeStats,
}

/// Decompress a container. The loaded weights must match the digest the
/// encoder stamped into the header.
pub fn decode_image(container: &BitstreamContainer, w: &ModelWeights) -> Result<DecodeOutput> {
    let cfg = &w.config;
    cfg.validate()?;
    let found = w.digest();
    if container.weight_digest != found {
        return Err(CodecError::DigestMismatch {
            expected: container.weight_digest,
            found,
        });
    }
    if container.context_kind != cfg.context_kind
        || container.context_kernel as usize != cfg.context_kernel
        || container.gmm_components as usize != cfg.gmm_components
        || container.channels as usize != cfg.image_channels
        || container.parity != cfg.parity
        || container.precision != PRECISION_BITS
    {
        return Err(CodecError::Container {
            message: "header fields disagree with the loaded model configuration".into(),
        });
    }
    let t_total = Instant::now();
    let mut stats = DecodeStats::default();

    let (h0, w0) = (container.height as usize, container.width as usize);
    let ph = h0.div_ceil(cfg.hyper_stride()) * cfg.hyper_stride();
    let pw = w0.div_ceil(cfg.hyper_stride()) * cfg.hyper_stride();
    let (yh, yw) = (ph / cfg.latent_stride(), pw / cfg.latent_stride());
    let (zh, zw) = (ph / cfg.hyper_stride(), pw / cfg.hyper_stride());
    let m = cfg.latent_channels;
    let zc = cfg.n_channels;

    // hyper latent
    let scale = ScaleTable::new();
    let prior = net::factorized_prior(w);
    let mut cache = TableCache::new();
    let t0 = Instant::now();
    let z_plane = zh * zw;
    let mut z_data = vec![0.0f32; zc * z_plane];
    {
        let mut dec = RangeDecoder::new(&container.z_stream)?;
        for ch in 0..zc {
            let q = quantize_params(prior.mu[ch] as f32, prior.sigma[ch] as f32, &scale);
            let table = cache.get(q, &scale);
            for p in 0..z_plane {
                z_data[ch * z_plane + p] = dec.decode(&table)? as f32;
            }
        }
    }
    let z_hat = Tensor::with_node([1, zc, zh, zw], z_data, None);
    stats.entropy_decode_ms += ms(t0);

    let bound = net::bind_constants(w);
    let mut tape = Tape::no_grad();
    let t0 = Instant::now();
    let hyper = net::hyper_synthesize(&mut tape, &bound, cfg, &z_hat)?;
    stats.hyper_synthesis_ms = ms(t0);

    let y_plane = yh * yw;
    let mut y_data = vec![0.0f32; m * y_plane];

    match cfg.context_kind {
        ContextKind::Checkerboard => {
            // pass 1: anchors from the hyperprior alone
            let t0 = Instant::now();
            let anchor_pos = parity_positions(yh, yw, true);
            let phi_a = ep_gathered(w, cfg, &hyper, None, &anchor_pos);
            let q_a = quantize_gathered(&phi_a, cfg, anchor_pos.len(), &scale);
            stats.gep_passes += 1;
            stats.gcm_passes += 1; // zero context feature counts as a pass
            stats.parameter_calculation_ms += ms(t0);

            let t0 = Instant::now();
            decode_gathered(
                &container.anchor_stream,
                &q_a,
                &scale,
                &mut cache,
                &anchor_pos,
                m,
                y_plane,
                &mut y_data,
            )?;
            stats.entropy_decode_ms += ms(t0);

            // pass 2: non-anchors from decoded anchors
            let t0 = Instant::now();
            let y_anchors = Tensor::with_node([1, m, yh, yw], y_data.clone(), None);
            let mask = make_mask(MaskKind::Checkerboard, cfg.context_kernel)?;
            let ctx = net::context_feature(&mut tape, &bound, cfg, &y_anchors, &mask)?;
            let non_anchor_pos = parity_positions(yh, yw, false);
            let phi_na = ep_gathered(w, cfg, &hyper, Some(&ctx), &non_anchor_pos);
            let q_na = quantize_gathered(&phi_na, cfg, non_anchor_pos.len(), &scale);
            stats.gep_passes += 1;
            stats.gcm_passes += 1;
            stats.parameter_calculation_ms += ms(t0);

            let t0 = Instant::now();
            decode_gathered(
                &container.non_anchor_stream,
                &q_na,
                &scale,
                &mut cache,
                &non_anchor_pos,
                m,
                y_plane,
                &mut y_data,
            )?;
            stats.entropy_decode_ms += ms(t0);
        }
        ContextKind::Serial => {
            decode_serial(container, w, cfg, &hyper, &mut y_data, &mut stats, &scale, &mut cache)?;
        }
        ContextKind::None => {
            let t0 = Instant::now();
            let all_pos: Vec<usize> = (0..y_plane).collect();
            let phi = ep_gathered(w, cfg, &hyper, None, &all_pos);
            let q = quantize_gathered(&phi, cfg, y_plane, &scale);
            stats.gep_passes += 1;
            stats.gcm_passes += 1;
            stats.parameter_calculation_ms += ms(t0);

            let t0 = Instant::now();
            decode_gathered(
                &container.anchor_stream,
                &q,
                &scale,
                &mut cache,
                &all_pos,
                m,
                y_plane,
                &mut y_data,
            )?;
            stats.entropy_decode_ms += ms(t0);
        }
    }

    let y_hat = Tensor::with_node([1, m, yh, yw], y_data, None);
    let t0 = Instant::now();
    let x_hat_pad = net::synthesize(&mut tape, &bound, cfg, &y_hat)?;
    stats.latent_synthesis_ms = ms(t0);
    let x_hat = unpad(&x_hat_pad, h0, w0);
    stats.total_ms = ms(t_total);
    Ok(DecodeOutput {
        x_hat,
        y_hat,
        z_hat,
        stats,
    })
}

/// Decode one substream whose element order is channel-major over a fixed
/// spatial position list.
#[allow(clippy::too_many_arguments)]
fn decode_gathered(
    stream: &[u8],
    q: &PhiQuantized,
    scale: &ScaleTable,
    cache: &mut TableCache,
    positions: &[usize],
    m: usize,
    y_plane: usize,
    y_data: &mut [f32],
) -> Result<()> {
    let n = positions.len();
    let tables: Vec<std::sync::Arc<CdfTable>> = match q {
        PhiQuantized::Gaussian(v) => cache.get_many(v, scale),
        PhiQuantized::Gmm(v) => v
            .iter()
            .map(|g| std::sync::Arc::new(gmm_cdf_table(g, scale)))
            .collect(),
    };
    let mut dec = RangeDecoder::new(stream)?;
    for c in 0..m {
        for (j, &p) in positions.iter().enumerate() {
            let s = dec.decode(&tables[c * n + j])?;
            y_data[c * y_plane + p] = s as f32;
        }
    }
    Ok(())
}

/// Raster-order serial decode: one parameter computation per latent
/// position over a cropped k x k window of the already-decoded latents.
#[allow(clippy::too_many_arguments)]
fn decode_serial(
    container: &BitstreamContainer,
    w: &ModelWeights,
    cfg: &ModelConfig,
    hyper: &Tensor,
    y_data: &mut [f32],
    stats: &mut DecodeStats,
    scale: &ScaleTable,
    cache: &mut TableCache,
) -> Result<()> {
    let m = cfg.latent_channels;
    let k = cfg.context_kernel;
    let r = k / 2;
    let [_, _, yh, yw] = hyper.shape();
    let y_plane = yh * yw;

    // effective (masked) context weights
    let mask = make_mask(MaskKind::Serial, k)?;
    let cm_w = w.get("cm.w");
    let wm = mask.weight_mask(2 * m, m);
    let w_eff: Vec<f32> = cm_w
        .data
        .iter()
        .zip(wm.data().iter())
        .map(|(&a, &b)| a * b)
        .collect();
    let cm_b = &w.get("cm.b").data;

    let hyper_data = hyper.data();
    let mut crop = vec![0.0f32; m * k * k];
    let mut x_col = vec![0.0f32; 4 * m];
    let mut dec = RangeDecoder::new(&container.anchor_stream)?;

    let ep0w = &w.get("ep.0.w").data;
    let ep0b = &w.get("ep.0.b").data;
    let ep1w = &w.get("ep.1.w").data;
    let ep1b = &w.get("ep.1.b").data;
    let ep2w = &w.get("ep.2.w").data;
    let ep2b = &w.get("ep.2.b").data;
    let slope = cfg.activation_slope;
    let ep_out = cfg.ep_out_channels();
    let mut h0 = vec![0.0f32; 4 * m];
    let mut h1 = vec![0.0f32; 3 * m];
    let mut phi = vec![0.0f32; ep_out];

    for row in 0..yh {
        for col in 0..yw {
            let t0 = Instant::now();
            // crop the visible neighbourhood (zeros outside the grid; future
            // positions are still zero in y_data and masked out anyway)
            crop.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..m {
                for ky in 0..k {
                    let iy = row as isize + ky as isize - r as isize;
                    if iy < 0 || iy >= yh as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = col as isize + kx as isize - r as isize;
                        if ix < 0 || ix >= yw as isize {
                            continue;
                        }
                        crop[(c * k + ky) * k + kx] =
                            y_data[c * y_plane + iy as usize * yw + ix as usize];
                    }
                }
            }
            // context feature at the center position (zero taps skipped,
            // like the full-grid convolution)
            for oc in 0..2 * m {
                let mut acc = cm_b[oc];
                let wblock = &w_eff[oc * m * k * k..][..m * k * k];
                for (cv, wv) in crop.iter().zip(wblock.iter()) {
                    if *wv != 0.0 {
                        acc += cv * wv;
                    }
                }
                x_col[2 * m + oc] = acc;
            }
            for c in 0..2 * m {
                x_col[c] = hyper_data[c * y_plane + row * yw + col];
            }
            // parameter network at one position
            matvec(ep0w, ep0b, &x_col, &mut h0, 4 * m);
            h0.iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v *= slope;
                }
            });
            matvec(ep1w, ep1b, &h0, &mut h1, 4 * m);
            h1.iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v *= slope;
                }
            });
            matvec(ep2w, ep2b, &h1, &mut phi, 3 * m);
            stats.gep_passes += 1;
            stats.gcm_passes += 1;
            stats.parameter_calculation_ms += ms(t0);

            // decode all channels at this position
            let t0 = Instant::now();
            if cfg.gmm_components == 1 {
                for c in 0..m {
                    let q = quantize_params(phi[c], net::sigma_scalar(phi[m + c]), scale);
                    let table = cache.get(q, scale);
                    let s = dec.decode(&table)?;
                    y_data[c * y_plane + row * yw + col] = s as f32;
                }
            } else {
                let kk = cfg.gmm_components;
                for c in 0..m {
                    let mut weights = Vec::with_capacity(kk);
                    let mut total = 0.0f32;
                    for t in 0..kk {
                        let wj = crate::tensor::softplus_scalar(phi[2 * m * kk + t]) + 1e-3;
                        total += wj;
                        weights.push(wj);
                    }
                    let comps: Vec<(f32, f32, f32)> = (0..kk)
                        .map(|t| {
                            (
                                weights[t] / total,
                                phi[t * m + c],
                                net::sigma_scalar(phi[m * kk + t * m + c]),
                            )
                        })
                        .collect();
                    let qg = quantize_gmm_params(&comps, scale);
                    let table = gmm_cdf_table(&qg, scale);
                    let s = dec.decode(&table)?;
                    y_data[c * y_plane + row * yw + col] = s as f32;
                }
            }
            stats.entropy_decode_ms += ms(t0);
        }
    }
    Ok(())
}

/// out[oc] = bias[oc] + sum_ic w[oc][ic] * x[ic], ic ascending.
fn matvec(w: &[f32], bias: &[f32], x: &[f32], out: &mut [f32], in_c: usize) {
    for (oc, slot) in out.iter_mut().enumerate() {
        let mut acc = bias[oc];
        let row = &w[oc * in_c..][..in_c];
        for (wv, xv) in row.iter().zip(x.iter()) {
            acc += wv * xv;
        }
        *slot = acc;
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

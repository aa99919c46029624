//! Network architecture: layer table, parameter binding, and the forward
//! passes for the analysis/synthesis transforms, hyper transforms, context
//! model, and parameter network.
//!
//! Downsampling uses strided 5x5 convolutions; upsampling uses 3x3
//! convolutions into 4x the channels followed by depth-to-space (sub-pixel
//! convolution), which inverts the stride arithmetic exactly with odd
//! kernels. The parameter network is a stack of three 1x1 convolutions.

use std::collections::HashMap;

use super::{ModelConfig, ModelWeights, Result};
use crate::checkerboard::{masked_conv2d, Mask};
use crate::entropy::{FactorizedPrior, SIGMA_MIN};
use crate::tensor::{Shape, Tape, Tensor};

/// One convolution layer: weight shape plus stride/padding. `subpixel`
/// layers are followed by depth-to-space.
#[derive(Clone, Debug)]
pub struct LayerSpec {
    pub name: &'static str,
    pub weight_shape: Shape,
    pub stride: usize,
    pub padding: usize,
    pub subpixel: bool,
}

/// The full layer table for a configuration. Synthesis channel widths taper
/// (N, 3N/4, N/2) to keep high-resolution stages light.
pub fn layer_specs(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let n = cfg.n_channels;
    let m = cfg.latent_channels;
    let ci = cfg.image_channels;
    let k = cfg.context_kernel;
    let (t1, t2) = (3 * n / 4, n / 2);
    vec![
        LayerSpec { name: "ga.0", weight_shape: [n, ci, 5, 5], stride: 2, padding: 2, subpixel: false },
        LayerSpec { name: "ga.1", weight_shape: [n, n, 5, 5], stride: 2, padding: 2, subpixel: false },
        LayerSpec { name: "ga.2", weight_shape: [n, n, 5, 5], stride: 2, padding: 2, subpixel: false },
        LayerSpec { name: "ga.3", weight_shape: [m, n, 5, 5], stride: 2, padding: 2, subpixel: false },
        LayerSpec { name: "gs.0", weight_shape: [4 * n, m, 3, 3], stride: 1, padding: 1, subpixel: true },
        LayerSpec { name: "gs.1", weight_shape: [4 * t1, n, 3, 3], stride: 1, padding: 1, subpixel: true },
        LayerSpec { name: "gs.2", weight_shape: [4 * t2, t1, 3, 3], stride: 1, padding: 1, subpixel: true },
        LayerSpec { name: "gs.3", weight_shape: [4 * ci, t2, 3, 3], stride: 1, padding: 1, subpixel: true },
        LayerSpec { name: "ha.0", weight_shape: [n, m, 3, 3], stride: 1, padding: 1, subpixel: false },
        LayerSpec { name: "ha.1", weight_shape: [n, n, 5, 5], stride: 2, padding: 2, subpixel: false },
        LayerSpec { name: "ha.2", weight_shape: [n, n, 5, 5], stride: 2, padding: 2, subpixel: false },
        LayerSpec { name: "hs.0", weight_shape: [4 * n, n, 3, 3], stride: 1, padding: 1, subpixel: true },
        LayerSpec { name: "hs.1", weight_shape: [4 * n, n, 3, 3], stride: 1, padding: 1, subpixel: true },
        LayerSpec { name: "hs.2", weight_shape: [2 * m, n, 3, 3], stride: 1, padding: 1, subpixel: false },
        LayerSpec { name: "cm", weight_shape: [2 * m, m, k, k], stride: 1, padding: k / 2, subpixel: false },
        LayerSpec { name: "ep.0", weight_shape: [4 * m, 4 * m, 1, 1], stride: 1, padding: 0, subpixel: false },
        LayerSpec { name: "ep.1", weight_shape: [3 * m, 4 * m, 1, 1], stride: 1, padding: 0, subpixel: false },
        LayerSpec { name: "ep.2", weight_shape: [cfg.ep_out_channels(), 3 * m, 1, 1], stride: 1, padding: 0, subpixel: false },
    ]
}

/// Parameter tensors bound for a forward pass, as constants (inference) or
/// tape leaves (training).
pub struct Bound {
    map: HashMap<String, Tensor>,
    /// Leaf registration order, matching `ModelWeights::tensors`.
    pub order: Vec<String>,
}

impl Bound {
    pub fn t(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }
}

pub fn bind_constants(w: &ModelWeights) -> Bound {
    let mut map = HashMap::new();
    let mut order = Vec::new();
    for t in &w.tensors {
        map.insert(t.name.clone(), t.tensor());
        order.push(t.name.clone());
    }
    Bound { map, order }
}

/// Register every parameter as a differentiable leaf, in storage order so
/// node ids are reproducible.
pub fn bind_leaves(w: &ModelWeights, tape: &mut Tape) -> Bound {
    let mut map = HashMap::new();
    let mut order = Vec::new();
    for t in &w.tensors {
        map.insert(t.name.clone(), tape.leaf(&t.tensor()));
        order.push(t.name.clone());
    }
    Bound { map, order }
}

fn conv(tape: &mut Tape, b: &Bound, name: &str, x: &Tensor, spec: &LayerSpec) -> Result<Tensor> {
    let w = b.t(&format!("{name}.w"));
    let bias = b.t(&format!("{name}.b"));
    let mut out = tape.conv2d(x, w, bias, spec.stride, spec.padding)?;
    if spec.subpixel {
        out = tape.depth_to_space(&out)?;
    }
    Ok(out)
}

fn spec_of<'a>(specs: &'a [LayerSpec], name: &str) -> &'a LayerSpec {
    specs.iter().find(|s| s.name == name).expect("known layer")
}

/// g_a: image -> latent y at 1/16 resolution.
pub fn analyze(tape: &mut Tape, b: &Bound, cfg: &ModelConfig, x: &Tensor) -> Result<Tensor> {
    let specs = layer_specs(cfg);
    let s = cfg.activation_slope;
    let mut t = conv(tape, b, "ga.0", x, spec_of(&specs, "ga.0"))?;
    t = tape.leaky_relu(&t, s)?;
    t = conv(tape, b, "ga.1", &t, spec_of(&specs, "ga.1"))?;
    t = tape.leaky_relu(&t, s)?;
    t = conv(tape, b, "ga.2", &t, spec_of(&specs, "ga.2"))?;
    t = tape.leaky_relu(&t, s)?;
    conv(tape, b, "ga.3", &t, spec_of(&specs, "ga.3"))
}

/// g_s: latent y-hat -> reconstructed image.
pub fn synthesize(tape: &mut Tape, b: &Bound, cfg: &ModelConfig, y_hat: &Tensor) -> Result<Tensor> {
    let specs = layer_specs(cfg);
    let s = cfg.activation_slope;
    let mut t = conv(tape, b, "gs.0", y_hat, spec_of(&specs, "gs.0"))?;
    t = tape.leaky_relu(&t, s)?;
    t = conv(tape, b, "gs.1", &t, spec_of(&specs, "gs.1"))?;
    t = tape.leaky_relu(&t, s)?;
    t = conv(tape, b, "gs.2", &t, spec_of(&specs, "gs.2"))?;
    t = tape.leaky_relu(&t, s)?;
    conv(tape, b, "gs.3", &t, spec_of(&specs, "gs.3"))
}

/// h_a: latent y -> hyper latent z at 1/4 of the latent grid.
pub fn hyper_analyze(tape: &mut Tape, b: &Bound, cfg: &ModelConfig, y: &Tensor) -> Result<Tensor> {
    let specs = layer_specs(cfg);
    let s = cfg.activation_slope;
    let mut t = conv(tape, b, "ha.0", y, spec_of(&specs, "ha.0"))?;
    t = tape.leaky_relu(&t, s)?;
    t = conv(tape, b, "ha.1", &t, spec_of(&specs, "ha.1"))?;
    t = tape.leaky_relu(&t, s)?;
    conv(tape, b, "ha.2", &t, spec_of(&specs, "ha.2"))
}

/// h_s: quantized hyper latent -> hyper feature (2M channels at y resolution).
pub fn hyper_synthesize(
    tape: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    z_hat: &Tensor,
) -> Result<Tensor> {
    let specs = layer_specs(cfg);
    let s = cfg.activation_slope;
    let mut t = conv(tape, b, "hs.0", z_hat, spec_of(&specs, "hs.0"))?;
    t = tape.leaky_relu(&t, s)?;
    t = conv(tape, b, "hs.1", &t, spec_of(&specs, "hs.1"))?;
    t = tape.leaky_relu(&t, s)?;
    conv(tape, b, "hs.2", &t, spec_of(&specs, "hs.2"))
}

/// g_cm: masked convolution over (partially visible) latents.
pub fn context_feature(
    tape: &mut Tape,
    b: &Bound,
    _cfg: &ModelConfig,
    y_input: &Tensor,
    mask: &Mask,
) -> Result<Tensor> {
    masked_conv2d(tape, y_input, b.t("cm.w"), mask, b.t("cm.b")).map_err(Into::into)
}

/// g_ep: pointwise stack from concatenated hyper feature and context feature
/// to raw entropy parameters.
pub fn param_network(
    tape: &mut Tape,
    b: &Bound,
    cfg: &ModelConfig,
    hyper: &Tensor,
    ctx: &Tensor,
) -> Result<Tensor> {
    let specs = layer_specs(cfg);
    let s = cfg.activation_slope;
    let cat = tape.concat_channels(hyper, ctx)?;
    let mut t = conv(tape, b, "ep.0", &cat, spec_of(&specs, "ep.0"))?;
    t = tape.leaky_relu(&t, s)?;
    t = conv(tape, b, "ep.1", &t, spec_of(&specs, "ep.1"))?;
    t = tape.leaky_relu(&t, s)?;
    conv(tape, b, "ep.2", &t, spec_of(&specs, "ep.2"))
}

/// Continuous sigma from the raw network output; shared by the training
/// loss and (in its scalar form) the coding paths.
pub fn sigma_from_raw(tape: &mut Tape, raw: &Tensor) -> Tensor {
    let sp = tape.softplus(raw);
    tape.add_scalar(&sp, SIGMA_MIN as f32)
}

/// Scalar twin of [`sigma_from_raw`]; bit-identical to the tape path.
pub fn sigma_scalar(raw: f32) -> f32 {
    crate::tensor::softplus_scalar(raw) + SIGMA_MIN as f32
}

/// Split a mean-scale phi (K = 1) into (mu, sigma_raw).
pub fn phi_split(tape: &mut Tape, cfg: &ModelConfig, phi: &Tensor) -> Result<(Tensor, Tensor)> {
    let m = cfg.latent_channels * cfg.gmm_components;
    let mu = tape.slice_channels(phi, 0, m)?;
    let sigma_raw = tape.slice_channels(phi, m, m)?;
    Ok((mu, sigma_raw))
}

/// The factorized prior over hyper-latent channels, as coding-side floats.
pub fn factorized_prior(w: &ModelWeights) -> FactorizedPrior {
    let mu = w.get("fp.mu").data.iter().map(|&v| v as f64).collect();
    let sigma = w
        .get("fp.s")
        .data
        .iter()
        .map(|&v| sigma_scalar(v) as f64)
        .collect();
    FactorizedPrior::new(mu, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ContextKind;

    fn tiny_setup() -> (ModelConfig, ModelWeights) {
        let cfg = ModelConfig::tiny(ContextKind::Checkerboard);
        let w = ModelWeights::init(&cfg, 42).unwrap();
        (cfg, w)
    }

    #[test]
    fn shape_pipeline_64() {
        let (cfg, w) = tiny_setup();
        let b = bind_constants(&w);
        let mut tape = Tape::no_grad();
        let x = Tensor::zeros([1, 1, 64, 64]);
        let y = analyze(&mut tape, &b, &cfg, &x).unwrap();
        assert_eq!(y.shape(), [1, cfg.latent_channels, 4, 4]);
        let z = hyper_analyze(&mut tape, &b, &cfg, &y).unwrap();
        assert_eq!(z.shape(), [1, cfg.n_channels, 1, 1]);
        let hyper = hyper_synthesize(&mut tape, &b, &cfg, &z).unwrap();
        assert_eq!(hyper.shape(), [1, 2 * cfg.latent_channels, 4, 4]);
        let x_hat = synthesize(&mut tape, &b, &cfg, &y).unwrap();
        assert_eq!(x_hat.shape(), x.shape());
    }

    #[test]
    fn zero_weights_produce_biases() {
        let (cfg, mut w) = tiny_setup();
        for t in &mut w.tensors {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let b = bind_constants(&w);
        let mut tape = Tape::no_grad();
        let x = Tensor::full([1, 1, 64, 64], 0.7);
        let y = analyze(&mut tape, &b, &cfg, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_network_shapes() {
        let (cfg, w) = tiny_setup();
        let b = bind_constants(&w);
        let mut tape = Tape::no_grad();
        let m = cfg.latent_channels;
        let hyper = Tensor::zeros([1, 2 * m, 4, 4]);
        let ctx = Tensor::zeros([1, 2 * m, 4, 4]);
        let phi = param_network(&mut tape, &b, &cfg, &hyper, &ctx).unwrap();
        assert_eq!(phi.shape(), [1, cfg.ep_out_channels(), 4, 4]);
        let (mu, sraw) = phi_split(&mut tape, &cfg, &phi).unwrap();
        assert_eq!(mu.shape(), [1, m, 4, 4]);
        assert_eq!(sraw.shape(), [1, m, 4, 4]);
    }

    #[test]
    fn sigma_paths_agree_bitwise() {
        let raws = [-30.0f32, -2.5, 0.0, 0.5413249, 3.0, 25.0];
        let t = Tensor::from_vec([1, 1, 1, 6], raws.to_vec()).unwrap();
        let mut tape = Tape::no_grad();
        let s = sigma_from_raw(&mut tape, &t);
        for (i, &raw) in raws.iter().enumerate() {
            assert_eq!(s.data()[i], sigma_scalar(raw));
        }
        // initialized raw gives sigma near 1
        assert!((sigma_scalar(0.5413249) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn factorized_prior_respects_floor() {
        let (_, mut w) = tiny_setup();
        w.get_mut("fp.s").data.iter_mut().for_each(|v| *v = -40.0);
        let p = factorized_prior(&w);
        assert!(p.sigma.iter().all(|&s| s >= SIGMA_MIN));
    }
}

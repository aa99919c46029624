//! Rate-distortion training: the noise-relaxed forward pass, the Adam
//! optimizer with global-norm gradient clipping, and finite-difference
//! verification of the full training gradient.

use crate::checkerboard::{make_mask, masked_conv2d, Mask, MaskKind};
use crate::codec::{
    entropy_params_one_pass, quantize_latents, CodecError, ContextKind, ModelConfig, ModelWeights,
    QuantizeMode,
};
use crate::codec::{bind_leaves, Bound};
use crate::data::Corpus;
use crate::entropy::{MIN_LIKELIHOOD, SIGMA_MIN};
use crate::rng::SplitMix64;
use crate::tensor::{sum_f64, Gradients, Tape, Tensor};

#[derive(Debug)]
pub enum TrainerError {
    /// Loss left the finite range.
    Diverged { step: usize, loss: f64 },
    Codec(CodecError),
    /// Gradient verification found offending tensors.
    GradientCheck { offenders: Vec<String>, max_rel_error: f64 },
}

impl std::fmt::Display for TrainerError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainerError::Diverged { step, loss } => {
                write!(f, "training diverged at step {step} (loss {loss})")
            }
            TrainerError::Codec(e) => write!(f, "{e}"),
            TrainerError::GradientCheck { offenders, max_rel_error } => write!(
                f,
                "gradient check failed (max rel error {max_rel_error:.3e}) in: {}",
                offenders.join(", ")
            ),
        }
    }
}

impl std::error::Error for TrainerError {}

impl From<CodecError> for TrainerError {
    fn from(e: CodecError) -> Self {
        TrainerError::Codec(e)
    }
}

impl From<crate::tensor::TensorError> for TrainerError {
    fn from(e: crate::tensor::TensorError) -> Self {
        TrainerError::Codec(CodecError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, TrainerError>;

/// Training hyper-parameters.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lambda: f64,
    pub steps: usize,
    pub batch: usize,
    pub patch_size: usize,
    pub learning_rate: f64,
    /// Step at which the learning rate halves.
    pub lr_decay_step: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn desk_default(model: ModelConfig) -> TrainConfig {
        TrainConfig {
            lambda: 0.01,
            steps: 20_000,
            batch: 8,
            patch_size: 64,
            learning_rate: 1e-4,
            lr_decay_step: 10_000,
            seed: 1,
            model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda <= 0.0 || self.learning_rate <= 0.0 {
            return Err(TrainerError::Codec(CodecError::Config {
                message: "lambda and learning rate must be positive".into(),
            }));
        }
        if self.patch_size % 64 != 0 || self.patch_size == 0 {
            return Err(TrainerError::Codec(CodecError::Config {
                message: format!("patch size must be a positive multiple of 64, got {}", self.patch_size),
            }));
        }
        if self.batch == 0 {
            return Err(TrainerError::Codec(CodecError::Config {
                message: "batch must be positive".into(),
            }));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Metrics from one training step (all f64 summaries of the f32 graph).
#[derive(Clone, Copy, Debug)]
pub struct StepMetrics {
    pub loss: f64,
    pub bpp: f64,
    pub bpp_y: f64,
    pub bpp_z: f64,
    pub mse: f64,
}

/// Mean squared error in f64.
pub fn mse(x: &Tensor, x_hat: &Tensor) -> f64 {
    debug_assert_eq!(x.shape(), x_hat.shape());
    let n = x.numel().max(1) as f64;
    x.data()
        .iter()
        .zip(x_hat.data().iter())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n
}

/// Peak signal-to-noise ratio on [0,1] intensities; +inf for identical
/// images.
pub fn psnr(x: &Tensor, x_hat: &Tensor) -> f64 {
    let e = mse(x, x_hat);
    if e == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * e.log10()
    }
}

/// Interval-likelihood bits of noisy latents under per-element (mu, raw
/// sigma) tensors: -log2(CDF(v + 1/2) - CDF(v - 1/2)). Returns the scalar
/// sum node and keeps everything differentiable.
fn rate_bits_node(
    tape: &mut Tape,
    values: &Tensor,
    mu: &Tensor,
    sigma: &Tensor,
) -> crate::tensor::Result<Tensor> {
    let d = tape.sub(values, mu)?;
    let up_arg = tape.add_scalar(&d, 0.5);
    let lo_arg = tape.add_scalar(&d, -0.5);
    let up = tape.div(&up_arg, sigma)?;
    let lo = tape.div(&lo_arg, sigma)?;
    let cdf_up = tape.normal_cdf(&up);
    let cdf_lo = tape.normal_cdf(&lo);
    let p = tape.sub(&cdf_up, &cdf_lo)?;
    let p = tape.clamp_min(&p, MIN_LIKELIHOOD as f32);
    let ln_p = tape.ln(&p);
    let total = tape.sum(&ln_p);
    Ok(tape.mul_scalar(&total, -std::f64::consts::LOG2_E as f32))
}

/// The full noise-relaxed forward pass. Returns the scalar loss node plus
/// f64 metrics. `mask_override` switches the context model to an arbitrary
/// mask over all positions (the random-mask laboratory path).
pub fn forward_loss(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    x: &Tensor,
    lambda: f64,
    rng: &mut SplitMix64,
    mask_override: Option<&Mask>,
) -> Result<(Tensor, StepMetrics)> {
    let [batch, _, h, w] = x.shape();
    let num_pixels = (batch * h * w) as f64;

    let y = crate::codec::analyze(tape, bound, cfg, x)?;
    let y_noisy = quantize_latents(tape, &y, QuantizeMode::Noise, Some(rng))?;
    let z = crate::codec::hyper_analyze(tape, bound, cfg, &y)?;
    let z_noisy = quantize_latents(tape, &z, QuantizeMode::Noise, Some(rng))?;

    // hyper-latent rate under the factorized prior
    let fp_mu = tape.broadcast_channels(bound.t("fp.mu"), z.shape())?;
    let fp_raw = tape.broadcast_channels(bound.t("fp.s"), z.shape())?;
    let fp_sp = tape.softplus(&fp_raw);
    let fp_sigma = tape.add_scalar(&fp_sp, SIGMA_MIN as f32);
    let bits_z = rate_bits_node(tape, &z_noisy, &fp_mu, &fp_sigma)?;

    let hyper = crate::codec::hyper_synthesize(tape, bound, cfg, &z_noisy)?;

    // context feature
    let phi = if let Some(mask) = mask_override {
        let ctx = masked_conv2d(tape, &y_noisy, bound.t("cm.w"), mask, bound.t("cm.b"))?;
        crate::codec::param_network(tape, bound, cfg, &hyper, &ctx)?
    } else {
        match cfg.context_kind {
            ContextKind::Checkerboard => {
                entropy_params_one_pass(tape, bound, cfg, &hyper, &y_noisy)?
            }
            ContextKind::Serial => {
                let mask = make_mask(MaskKind::Serial, cfg.context_kernel)?;
                let ctx = masked_conv2d(tape, &y_noisy, bound.t("cm.w"), &mask, bound.t("cm.b"))?;
                crate::codec::param_network(tape, bound, cfg, &hyper, &ctx)?
            }
            ContextKind::None => {
                let m = cfg.latent_channels;
                let ctx = Tensor::zeros([batch, 2 * m, y.shape()[2], y.shape()[3]]);
                crate::codec::param_network(tape, bound, cfg, &hyper, &ctx)?
            }
        }
    };

    // latent rate
    let bits_y = if cfg.gmm_components == 1 {
        let (mu, sigma_raw) = crate::codec::phi_split(tape, cfg, &phi)?;
        let sp = tape.softplus(&sigma_raw);
        let sigma = tape.add_scalar(&sp, SIGMA_MIN as f32);
        rate_bits_node(tape, &y_noisy, &mu, &sigma)?
    } else {
        gmm_rate_bits_node(tape, cfg, &phi, &y_noisy)?
    };

    // distortion
    let x_hat = crate::codec::synthesize(tape, bound, cfg, &y_noisy)?;
    let diff = tape.sub(&x_hat, x)?;
    let sq = tape.mul(&diff, &diff)?;
    let mse_node = tape.mean(&sq);

    // loss = (bits_y + bits_z)/pixels + lambda * mse
    let bits = tape.add(&bits_y, &bits_z)?;
    let rate = tape.mul_scalar(&bits, (1.0 / num_pixels) as f32);
    let dist = tape.mul_scalar(&mse_node, lambda as f32);
    let loss = tape.add(&rate, &dist)?;

    let bpp_y = bits_y.item() as f64 / num_pixels;
    let bpp_z = bits_z.item() as f64 / num_pixels;
    let mse_v = sum_f64(&sq) / sq.numel() as f64;
    let metrics = StepMetrics {
        loss: bpp_y + bpp_z + lambda * mse_v,
        bpp: bpp_y + bpp_z,
        bpp_y,
        bpp_z,
        mse: mse_v,
    };
    Ok((loss, metrics))
}

/// Mixture-model rate: p = sum_k pi_k * interval_k, with pi from
/// softplus-normalized logits.
fn gmm_rate_bits_node(
    tape: &mut Tape,
    cfg: &ModelConfig,
    phi: &Tensor,
    y_noisy: &Tensor,
) -> crate::tensor::Result<Tensor> {
    let m = cfg.latent_channels;
    let k = cfg.gmm_components;
    // normalized mixture weights, one logit channel per component
    let mut weights = Vec::with_capacity(k);
    let mut total: Option<Tensor> = None;
    for t in 0..k {
        let logit = tape.slice_channels(phi, 2 * m * k + t, 1)?;
        let sp = tape.softplus(&logit);
        let w = tape.add_scalar(&sp, 1e-3);
        total = Some(match total {
            None => w.clone(),
            Some(acc) => tape.add(&acc, &w)?,
        });
        weights.push(w);
    }
    let total = total.expect("k >= 1");
    let mut p_mix: Option<Tensor> = None;
    for (t, w) in weights.iter().enumerate() {
        let pi = tape.div(w, &total)?;
        let pi_full = tape.repeat_channels(&pi, m)?;
        let mu = tape.slice_channels(phi, t * m, m)?;
        let raw = tape.slice_channels(phi, m * k + t * m, m)?;
        let sp = tape.softplus(&raw);
        let sigma = tape.add_scalar(&sp, SIGMA_MIN as f32);
        let d = tape.sub(y_noisy, &mu)?;
        let up_arg = tape.add_scalar(&d, 0.5);
        let lo_arg = tape.add_scalar(&d, -0.5);
        let up = tape.div(&up_arg, &sigma)?;
        let lo = tape.div(&lo_arg, &sigma)?;
        let cdf_up = tape.normal_cdf(&up);
        let cdf_lo = tape.normal_cdf(&lo);
        let p = tape.sub(&cdf_up, &cdf_lo)?;
        let contrib = tape.mul(&pi_full, &p)?;
        p_mix = Some(match p_mix {
            None => contrib,
            Some(acc) => tape.add(&acc, &contrib)?,
        });
    }
    let p = tape.clamp_min(&p_mix.expect("k >= 1"), MIN_LIKELIHOOD as f32);
    let ln_p = tape.ln(&p);
    let total_ln = tape.sum(&ln_p);
    Ok(tape.mul_scalar(&total_ln, -std::f64::consts::LOG2_E as f32))
}

/// Adam with bias correction and global-norm gradient clipping.
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl Adam {
    pub fn new(w: &ModelWeights) -> Adam {
        Adam {
            m: w.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            v: w.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update. `grads[i]` pairs with `w.tensors[i]`; missing
    /// gradients leave the tensor untouched.
    pub fn update(&mut self, w: &mut ModelWeights, grads: &[Option<Vec<f32>>], lr: f64) {
        self.t += 1;
        // global-norm clip
        let mut sq = 0.0f64;
        for g in grads.iter().flatten() {
            for &v in g {
                sq += (v as f64) * (v as f64);
            }
        }
        let norm = sq.sqrt();
        let scale = if norm > self.clip_norm && norm > 0.0 {
            (self.clip_norm / norm) as f32
        } else {
            1.0
        };
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut w.tensors[i].data;
            for j in 0..g.len() {
                let gj = (g[j] * scale) as f64;
                let mj = self.beta1 * m[j] as f64 + (1.0 - self.beta1) * gj;
                let vj = self.beta2 * v[j] as f64 + (1.0 - self.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let m_hat = mj / bc1;
                let v_hat = vj / bc2;
                p[j] -= (lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
            }
        }
    }
}

/// Extract per-tensor gradients in weight-storage order.
pub fn collect_gradients(
    w: &ModelWeights,
    bound: &Bound,
    grads: &Gradients,
) -> Vec<Option<Vec<f32>>> {
    w.tensors
        .iter()
        .map(|t| grads.get(bound.t(&t.name)).map(|g| g.to_vec()))
        .collect()
}

/// One optimization step on a batch. The mask override is the random-mask
/// supernet hook.
pub fn train_step(
    w: &mut ModelWeights,
    opt: &mut Adam,
    batch: &Tensor,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut SplitMix64,
    mask_override: Option<&Mask>,
) -> Result<StepMetrics> {
    let mut tape = Tape::new();
    let bound = bind_leaves(w, &mut tape);
    let (loss, metrics) =
        forward_loss(&mut tape, &bound, &cfg.model, batch, cfg.lambda, rng, mask_override)?;
    if !metrics.loss.is_finite() {
        return Err(TrainerError::Diverged {
            step,
            loss: metrics.loss,
        });
    }
    let grads = tape.backward(&loss)?;
    let collected = collect_gradients(w, &bound, &grads);
    let lr = if step >= cfg.lr_decay_step {
        cfg.learning_rate * 0.5
    } else {
        cfg.learning_rate
    };
    opt.update(w, &collected, lr);
    Ok(metrics)
}

/// Full training loop. `mask_for_step` supplies the per-step context mask
/// for random-mask training; `None` trains the configured context model.
pub fn run_training(
    cfg: &TrainConfig,
    corpus: &Corpus,
    mut mask_for_step: impl FnMut(usize) -> Option<Mask>,
    mut on_step: impl FnMut(usize, &StepMetrics),
) -> Result<ModelWeights> {
    cfg.validate()?;
    let mut w = ModelWeights::init(&cfg.model, cfg.seed)?;
    let mut opt = Adam::new(&w);
    let mut rng = SplitMix64::new(cfg.seed ^ 0x7261696e);
    for step in 0..cfg.steps {
        let batch = corpus.batch(&mut rng, cfg.batch, cfg.patch_size);
        let mask = mask_for_step(step);
        let metrics = train_step(&mut w, &mut opt, &batch, cfg, step, &mut rng, mask.as_ref())?;
        on_step(step, &metrics);
    }
    Ok(w)
}

/// Report from [`verify_gradients`].
#[derive(Debug)]
pub struct GradReport {
    /// (tensor name, max relative error over sampled coordinates)
    pub per_tensor: Vec<(String, f64)>,
    pub max_rel_error: f64,
}

/// Check the analytic gradient of the full training loss against central
/// finite differences, on a random coordinate sample from every weight
/// tensor. The noise draw is fixed by the seed so the loss is a
/// deterministic function; finite differences replay the recorded graph in
/// f64.
pub fn verify_gradients(
    w: &ModelWeights,
    lambda: f64,
    x: &Tensor,
    seed: u64,
    samples_per_tensor: usize,
    threshold: f64,
) -> Result<GradReport> {
    let cfg = &w.config;
    let mut tape = Tape::new();
    let bound = bind_leaves(w, &mut tape);
    let mut noise_rng = SplitMix64::new(seed);
    let (loss, _) = forward_loss(&mut tape, &bound, cfg, x, lambda, &mut noise_rng, None)?;
    let loss_id = loss.node().expect("training tape records the loss");
    let grads = tape.backward(&loss)?;

    let mut sample_rng = SplitMix64::new(seed ^ 0x67726164);
    let mut per_tensor = Vec::new();
    let mut max_rel = 0.0f64;
    for t in &w.tensors {
        let leaf = bound.t(&t.name);
        let leaf_id = leaf.node().expect("leaves are recorded");
        let analytic: Vec<f32> = grads
            .get(leaf)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; t.data.len()]);
        let base: Vec<f64> = t.data.iter().map(|&v| v as f64).collect();
        let mut tensor_max = 0.0f64;
        let n = t.data.len();
        for _ in 0..samples_per_tensor.min(n) {
            let j = sample_rng.below(n);
            let fd = |eps: f64| {
                let mut plus = base.clone();
                plus[j] += eps;
                let mut minus = base.clone();
                minus[j] -= eps;
                let fp = tape.replay_f64(loss_id, &[(leaf_id, &plus)])[0];
                let fm = tape.replay_f64(loss_id, &[(leaf_id, &minus)])[0];
                (fp - fm) / (2.0 * eps)
            };
            // two-scale estimate: when the bracket straddles an activation
            // kink the central difference is not a derivative estimate at
            // all, so coordinates where the two scales disagree are skipped
            // rather than counted against the analytic gradient
            let c1 = fd(1e-4);
            let c2 = fd(1e-5);
            if (c1 - c2).abs() > 1e-3 * c1.abs().max(c2.abs()) + 1e-9 {
                continue;
            }
            let rel = (analytic[j] as f64 - c2).abs() / c2.abs().max(1e-5);
            if rel > tensor_max {
                tensor_max = rel;
            }
        }
        if tensor_max > max_rel {
            max_rel = tensor_max;
        }
        per_tensor.push((t.name.clone(), tensor_max));
    }
    if max_rel >= threshold {
        let offenders = per_tensor
            .iter()
            .filter(|(_, e)| *e >= threshold)
            .map(|(n, _)| n.clone())
            .collect();
        return Err(TrainerError::GradientCheck {
            offenders,
            max_rel_error: max_rel,
        });
    }
    Ok(GradReport {
        per_tensor,
        max_rel_error: max_rel,
    })
}

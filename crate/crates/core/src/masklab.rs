//! Random-mask laboratory: train one weight-sharing context supernet under a
//! fresh random mask per step, then score arbitrary context patterns by how
//! much rate they save against the context-free baseline.
//!
//! Evaluation feeds the mask to the context model over the full ground-truth
//! latents and reads the estimated bit count; it never runs the actual coder
//! and does not require causal masks. Because the weights are shared, the
//! latents and the reconstruction are identical for every mask, so bit-rate
//! differences isolate the context pattern's contribution.

use crate::checkerboard::{make_mask, masked_conv2d, Mask, MaskKind};
use crate::codec::{
    analyze, bind_constants, factorized_prior, hyper_analyze, hyper_synthesize, param_network,
    round_latents, synthesize, CodecError, ModelWeights, PhiMaps,
};
use crate::data::Corpus;
use crate::entropy::{factorized_bits, gaussian_bits};
use crate::rng::SplitMix64;
use crate::tensor::{Tape, Tensor};
use crate::trainer::{run_training, Result, StepMetrics, TrainConfig, TrainerError};

/// Rate saving ratio: (R0 - RM) / R0.
pub fn rate_saving_ratio(r0: f64, rm: f64) -> f64 {
    (r0 - rm) / r0
}

/// One evaluated mask pattern.
#[derive(Clone, Debug)]
pub struct MaskEvalReport {
    pub description: String,
    /// Number of referenced neighbours (ones in the mask).
    pub k_ref: usize,
    /// Estimated bits per pixel under this mask.
    pub bpp: f64,
    /// Rate saving ratio against the zero-mask baseline (fraction).
    pub eta: f64,
    pub dataset_id: String,
}

impl MaskEvalReport {
    /// Re-derive eta from the stored bpp and a baseline; the stored field
    /// must agree.
    pub fn eta_consistent_with(&self, r0: f64, tol: f64) -> bool {
        (self.eta - rate_saving_ratio(r0, self.bpp)).abs() <= tol
    }
}

/// Train the random-mask supernet: every step draws a fresh equiprobable
/// 5x5 mask (center forced to zero) for the shared context weights. The
/// per-step mask seed derives from the config seed, so runs are
/// bit-reproducible.
pub fn train_random_mask_model(
    cfg: &TrainConfig,
    corpus: &Corpus,
    mut on_step: impl FnMut(usize, &StepMetrics),
) -> Result<ModelWeights> {
    if cfg.model.context_kernel != 5 {
        return Err(TrainerError::Codec(CodecError::Config {
            message: format!(
                "random-mask supernet uses a 5x5 context kernel, got {}",
                cfg.model.context_kernel
            ),
        }));
    }
    let mut mask_seeds = SplitMix64::new(cfg.seed ^ 0x6d61736b);
    run_training(
        cfg,
        corpus,
        |_step| {
            let seed = mask_seeds.next_u64();
            Some(make_mask(MaskKind::Random { seed }, 5).expect("odd kernel"))
        },
        |step, m| on_step(step, m),
    )
}

/// Deterministic forward pass shared by every mask evaluation: latents,
/// hyper latents and the hyper feature depend only on the weights and image.
struct EvalContext {
    y_hat: Tensor,
    z_hat: Tensor,
    hyper: Tensor,
    num_pixels: f64,
}

fn eval_forward(w: &ModelWeights, image: &Tensor) -> Result<EvalContext> {
    let cfg = &w.config;
    let bound = bind_constants(w);
    let mut tape = Tape::no_grad();
    let y = analyze(&mut tape, &bound, cfg, image)?;
    let (y_hat, _) = round_latents(&y);
    let z = hyper_analyze(&mut tape, &bound, cfg, &y)?;
    let (z_hat, _) = round_latents(&z);
    let hyper = hyper_synthesize(&mut tape, &bound, cfg, &z_hat)?;
    let [n, _, h, wd] = image.shape();
    Ok(EvalContext {
        y_hat,
        z_hat,
        hyper,
        num_pixels: (n * h * wd) as f64,
    })
}

/// Estimated BPP of one image under a fixed mask.
fn eval_bpp(w: &ModelWeights, ctx: &EvalContext, mask: &Mask) -> Result<f64> {
    let cfg = &w.config;
    let bound = bind_constants(w);
    let mut tape = Tape::no_grad();
    let ctx_feat = masked_conv2d(&mut tape, &ctx.y_hat, bound.t("cm.w"), mask, bound.t("cm.b"))?;
    let phi = param_network(&mut tape, &bound, cfg, &ctx.hyper, &ctx_feat)?;
    let maps = PhiMaps::from_phi(&phi, cfg);
    let m = cfg.latent_channels;
    let plane = ctx.y_hat.shape()[2] * ctx.y_hat.shape()[3];
    let mut bits_y = 0.0f64;
    match &maps {
        PhiMaps::Gaussian { mu, sigma } => {
            for c in 0..m {
                for p in 0..plane {
                    let idx = c * plane + p;
                    bits_y += gaussian_bits(
                        mu[idx] as f64,
                        sigma[idx] as f64,
                        ctx.y_hat.data()[idx] as f64,
                    );
                }
            }
        }
        PhiMaps::Gmm { .. } => {
            return Err(TrainerError::Codec(CodecError::Config {
                message: "mask evaluation supports the mean-scale model (K = 1)".into(),
            }));
        }
    }
    let bits_z = factorized_bits(&ctx.z_hat, &factorized_prior(w));
    Ok((bits_y + bits_z) / ctx.num_pixels)
}

/// Evaluate one mask over an evaluation corpus. Masks smaller than the
/// model's context kernel are zero-padded into it.
pub fn eval_mask(
    w: &ModelWeights,
    mask: &Mask,
    corpus: &Corpus,
    dataset_id: &str,
    baseline_bpp: Option<f64>,
) -> Result<MaskEvalReport> {
    // reports keep the requested pattern's name even when zero-padded into
    // the model's kernel
    let description = mask.description();
    let k_ref = mask.count_ones();
    let mask = if mask.k() == w.config.context_kernel {
        mask.clone()
    } else {
        mask.embed(w.config.context_kernel)?
    };
    let mut total = 0.0f64;
    for image in &corpus.images {
        let ctx = eval_forward(w, image)?;
        total += eval_bpp(w, &ctx, &mask)?;
    }
    let bpp = total / corpus.images.len() as f64;
    let eta = baseline_bpp.map(|r0| rate_saving_ratio(r0, bpp)).unwrap_or(0.0);
    Ok(MaskEvalReport {
        description,
        k_ref,
        bpp,
        eta,
        dataset_id: dataset_id.to_string(),
    })
}

/// Mask-independent reconstruction (weight sharing means every mask sees
/// the same latents and the same decoded image).
pub fn eval_reconstruction(w: &ModelWeights, image: &Tensor) -> Result<Tensor> {
    let bound = bind_constants(w);
    let mut tape = Tape::no_grad();
    let y = analyze(&mut tape, &bound, &w.config, image)?;
    let (y_hat, _) = round_latents(&y);
    Ok(synthesize(&mut tape, &bound, &w.config, &y_hat)?)
}

/// Baseline BPP: the zero mask (context modeling disabled).
pub fn baseline_bpp(w: &ModelWeights, corpus: &Corpus, dataset_id: &str) -> Result<f64> {
    let zero = make_mask(MaskKind::Zero, w.config.context_kernel)?;
    Ok(eval_mask(w, &zero, corpus, dataset_id, None)?.bpp)
}

/// Evaluate many masks with one shared forward pass per image. The first
/// mask must be the zero mask; it defines the baseline for every eta.
fn eval_masks_shared(
    w: &ModelWeights,
    masks: &[Mask],
    corpus: &Corpus,
    dataset_id: &str,
) -> Result<Vec<MaskEvalReport>> {
    let embedded: Vec<Mask> = masks
        .iter()
        .map(|m| {
            if m.k() == w.config.context_kernel {
                Ok(m.clone())
            } else {
                m.embed(w.config.context_kernel).map_err(Into::into)
            }
        })
        .collect::<Result<_>>()?;
    let mut totals = vec![0.0f64; masks.len()];
    for image in &corpus.images {
        let ctx = eval_forward(w, image)?;
        for (total, mask) in totals.iter_mut().zip(embedded.iter()) {
            *total += eval_bpp(w, &ctx, mask)?;
        }
    }
    let n = corpus.images.len() as f64;
    let r0 = totals[0] / n;
    Ok(masks
        .iter()
        .zip(totals.iter())
        .map(|(mask, &total)| {
            let bpp = total / n;
            MaskEvalReport {
                description: mask.description(),
                k_ref: mask.count_ones(),
                bpp,
                eta: rate_saving_ratio(r0, bpp),
                dataset_id: dataset_id.to_string(),
            }
        })
        .collect())
}

/// All 24 single-reference masks of the 5x5 kernel, with their offsets.
pub fn single_reference_offsets() -> Vec<(i32, i32)> {
    let mut v = Vec::with_capacity(24);
    for dy in -2..=2 {
        for dx in -2..=2 {
            if dy != 0 || dx != 0 {
                v.push((dy, dx));
            }
        }
    }
    v
}

/// Evaluate every single-reference 5x5 mask. Returns 24 reports in offset
/// scan order.
pub fn single_reference_sweep(
    w: &ModelWeights,
    corpus: &Corpus,
    dataset_id: &str,
) -> Result<Vec<MaskEvalReport>> {
    let mut masks = vec![make_mask(MaskKind::Zero, 5)?];
    for (dy, dx) in single_reference_offsets() {
        masks.push(make_mask(MaskKind::SingleRef { dy, dx }, 5)?);
    }
    let mut reports = eval_masks_shared(w, &masks, corpus, dataset_id)?;
    reports.remove(0); // drop the baseline row, keep the 24 single-reference ones
    Ok(reports)
}

/// The six standard patterns: non-reference, serial 3x3 / 5x5, checkerboard
/// 3x3 / 5x5, and all neighbours in 3x3.
pub fn table1_protocol(
    w: &ModelWeights,
    corpus: &Corpus,
    dataset_id: &str,
) -> Result<Vec<MaskEvalReport>> {
    let patterns = vec![
        make_mask(MaskKind::Zero, 5)?,
        make_mask(MaskKind::Serial, 3)?,
        make_mask(MaskKind::Serial, 5)?,
        make_mask(MaskKind::Checkerboard, 3)?,
        make_mask(MaskKind::Checkerboard, 5)?,
        make_mask(MaskKind::AllNeighbors3, 3)?,
    ];
    eval_masks_shared(w, &patterns, corpus, dataset_id)
}

/// CSV with one row per report: description, k_ref, bpp, eta_percent.
pub fn reports_to_csv(reports: &[MaskEvalReport]) -> String {
    let mut out = String::from("description,k_ref,bpp,eta_percent\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{:.6},{:.3}\n",
            r.description,
            r.k_ref,
            r.bpp,
            r.eta * 100.0
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{ContextKind, ModelConfig};
    use crate::data::synthetic_corpus;

    fn tiny_weights(seed: u64) -> ModelWeights {
        let cfg = ModelConfig {
            n_channels: 8,
            latent_channels: 6,
            context_kernel: 5,
            context_kind: ContextKind::Checkerboard,
            ..ModelConfig::default()
        };
        ModelWeights::init(&cfg, seed).unwrap()
    }

    #[test]
    fn eta_arithmetic() {
        let eta = rate_saving_ratio(0.4332, 0.3648);
        assert!((eta - 0.1579).abs() < 1e-4, "eta {eta}");
        assert_eq!(rate_saving_ratio(0.4332, 0.4332), 0.0);
    }

    #[test]
    fn zero_mask_is_the_baseline() {
        let w = tiny_weights(3);
        let corpus = synthetic_corpus(10, 2, 64);
        let r0 = baseline_bpp(&w, &corpus, "synth").unwrap();
        let zero = make_mask(MaskKind::Zero, 5).unwrap();
        let report = eval_mask(&w, &zero, &corpus, "synth", Some(r0)).unwrap();
        assert_eq!(report.eta, 0.0);
        assert_eq!(report.k_ref, 0);
        assert!(report.eta_consistent_with(r0, 1e-9));
    }

    #[test]
    fn reconstruction_is_mask_independent() {
        let w = tiny_weights(5);
        let corpus = synthetic_corpus(11, 1, 64);
        let x = &corpus.images[0];
        let a = eval_reconstruction(&w, x).unwrap();
        let b = eval_reconstruction(&w, x).unwrap();
        assert_eq!(a.data(), b.data());
        // and bpp evaluation does not mutate the weights
        let before = w.clone();
        let mask = make_mask(MaskKind::Checkerboard, 5).unwrap();
        let _ = eval_mask(&w, &mask, &corpus, "synth", None).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn sweep_covers_all_offsets() {
        let w = tiny_weights(7);
        let corpus = synthetic_corpus(13, 1, 64);
        let reports = single_reference_sweep(&w, &corpus, "synth").unwrap();
        assert_eq!(reports.len(), 24);
        for r in &reports {
            assert_eq!(r.k_ref, 1, "{}", r.description);
        }
        // distinct offsets
        let mut descriptions: Vec<&str> = reports.iter().map(|r| r.description.as_str()).collect();
        descriptions.dedup();
        assert_eq!(descriptions.len(), 24);
    }

    #[test]
    fn table1_reference_counts() {
        let w = tiny_weights(9);
        let corpus = synthetic_corpus(17, 1, 64);
        let reports = table1_protocol(&w, &corpus, "synth").unwrap();
        let k_ref: Vec<usize> = reports.iter().map(|r| r.k_ref).collect();
        assert_eq!(k_ref, vec![0, 4, 12, 4, 12, 8]);
        // zero-mask eta is exactly zero, and every eta recomputes
        assert_eq!(reports[0].eta, 0.0);
        let r0 = reports[0].bpp;
        for r in &reports {
            assert!(r.eta_consistent_with(r0, 1e-9), "{}", r.description);
        }
    }

    #[test]
    fn csv_shape() {
        let reports = vec![
            MaskEvalReport {
                description: "non-reference".into(),
                k_ref: 0,
                bpp: 0.4332,
                eta: 0.0,
                dataset_id: "synth".into(),
            },
            MaskEvalReport {
                description: "checkerboard 5x5".into(),
                k_ref: 12,
                bpp: 0.3648,
                eta: rate_saving_ratio(0.4332, 0.3648),
                dataset_id: "synth".into(),
            },
        ];
        let csv = reports_to_csv(&reports);
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "description,k_ref,bpp,eta_percent");
        assert!(lines[2].starts_with("checkerboard 5x5,12,0.3648"));
        assert!(lines[2].ends_with("15.789"));
    }

    #[test]
    fn random_mask_training_smoke() {
        // a few steps run, reproducibly, and reject non-5x5 kernels
        let cfg = TrainConfig {
            lambda: 0.01,
            steps: 3,
            batch: 2,
            patch_size: 64,
            learning_rate: 1e-4,
            lr_decay_step: 100,
            seed: 5,
            model: ModelConfig {
                n_channels: 8,
                latent_channels: 6,
                context_kernel: 5,
                ..ModelConfig::default()
            },
        };
        let corpus = synthetic_corpus(19, 2, 64);
        let a = train_random_mask_model(&cfg, &corpus, |_, _| {}).unwrap();
        let b = train_random_mask_model(&cfg, &corpus, |_, _| {}).unwrap();
        assert_eq!(a, b);

        let mut bad = cfg.clone();
        bad.model.context_kernel = 3;
        assert!(train_random_mask_model(&bad, &corpus, |_, _| {}).is_err());
    }
}

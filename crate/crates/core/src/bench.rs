//! Decode timing harness: per-phase latency (median over repeats after
//! warmup), parameter-pass counts, and throughput. Absolute milliseconds are
//! hardware-dependent; only ratios and counts are ever gated on.

use crate::codec::{decode_image, encode_image, CodecError, ModelWeights, Result};
use crate::par::with_thread_count;
use crate::tensor::Tensor;

/// Published full-scale GPU reference (Kodak): total decode milliseconds of
/// the serial context model against its checkerboard replacement.
pub const REFERENCE_SERIAL_MS: f64 = 1323.66;
pub const REFERENCE_PARALLEL_MS: f64 = 29.66;

/// Per-phase decode timing for one (model, image) pair.
#[derive(Clone, Debug)]
pub struct PhaseTiming {
    pub hyper_synthesis_ms: f64,
    pub parameter_calculation_ms: f64,
    pub latent_synthesis_ms: f64,
    /// Table construction plus range decoding.
    pub entropy_decode_ms: f64,
    pub total_ms: f64,
    /// parameter_calculation / total.
    pub percent_param: f64,
    /// Decoded pixels per second.
    pub throughput_pps: f64,
    pub gep_passes: u64,
    pub gcm_passes: u64,
    pub width: u32,
    pub height: u32,
    pub threads: usize,
}

impl PhaseTiming {
    pub fn mpps(&self) -> f64 {
        self.throughput_pps / 1e6
    }
}

/// Total-decode speedup of `parallel` over `serial`.
pub fn speedup(serial: &PhaseTiming, parallel: &PhaseTiming) -> f64 {
    serial.total_ms / parallel.total_ms
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

/// Encode `image` once, then time `repeats` decodes after `warmup` uns
/// against the wall clock, pinned to `threads` rayon workers. Every decode
/// is checked against the encoder's latents; a benchmark that trades
/// correctness would be meaningless.
pub fn bench_decode(
    w: &ModelWeights,
    image: &Tensor,
    repeats: usize,
    warmup: usize,
    threads: usize,
) -> Result<PhaseTiming> {
    if repeats < 5 || warmup < 2 {
        return Err(CodecError::Config {
            message: format!("need repeats >= 5 and warmup >= 2, got {repeats}/{warmup}"),
        });
    }
    let enc = encode_image(image, w)?;
    let [_, _, h, wd] = image.shape();

    with_thread_count(threads, || -> Result<PhaseTiming> {
        for _ in 0..warmup {
            let out = decode_image(&enc.container, w)?;
            if out.y_hat.data() != enc.y_hat.data() {
                return Err(CodecError::Container {
                    message: "benchmark decode disagrees with the encoder's latents".into(),
                });
            }
        }
        let mut hyper = Vec::with_capacity(repeats);
        let mut param = Vec::with_capacity(repeats);
        let mut latent = Vec::with_capacity(repeats);
        let mut entropy = Vec::with_capacity(repeats);
        let mut total = Vec::with_capacity(repeats);
        let mut gep = 0u64;
        let mut gcm = 0u64;
        for _ in 0..repeats {
            let out = decode_image(&enc.container, w)?;
            if out.y_hat.data() != enc.y_hat.data() {
                return Err(CodecError::Container {
                    message: "benchmark decode disagrees with the encoder's latents".into(),
                });
            }
            let s = &out.stats;
            hyper.push(s.hyper_synthesis_ms);
            param.push(s.parameter_calculation_ms);
            latent.push(s.latent_synthesis_ms);
            entropy.push(s.entropy_decode_ms);
            total.push(s.total_ms);
            gep = s.gep_passes;
            gcm = s.gcm_passes;
        }
        let total_ms = median(total);
        let parameter_calculation_ms = median(param);
        Ok(PhaseTiming {
            hyper_synthesis_ms: median(hyper),
            parameter_calculation_ms,
            latent_synthesis_ms: median(latent),
            entropy_decode_ms: median(entropy),
            total_ms,
            percent_param: parameter_calculation_ms / total_ms,
            throughput_pps: (h * wd) as f64 / (total_ms / 1e3),
            gep_passes: gep,
            gcm_passes: gcm,
            width: wd as u32,
            height: h as u32,
            threads,
        })
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

/// One row per (variant label, timing). The CSV mirrors the phase table
/// plus throughput and pass counts.
pub fn emit_report(rows: &[(String, PhaseTiming)], format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from(
                "variant,width,height,threads,hyper_ms,param_ms,latent_ms,entropy_ms,total_ms,percent_param,mpps,gep_passes\n",
            );
            for (label, t) in rows {
                out.push_str(&format!(
                    "{label},{},{},{},{:.3},{:.3},{:.3},{:.3},{:.3},{:.1},{:.4},{}\n",
                    t.width,
                    t.height,
                    t.threads,
                    t.hyper_synthesis_ms,
                    t.parameter_calculation_ms,
                    t.latent_synthesis_ms,
                    t.entropy_decode_ms,
                    t.total_ms,
                    t.percent_param * 100.0,
                    t.mpps(),
                    t.gep_passes,
                ));
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = String::from(
                "| variant | hyper (ms) | param (ms) | latent (ms) | entropy (ms) | total (ms) | param % | Mpps |\n|---|---|---|---|---|---|---|---|\n",
            );
            for (label, t) in rows {
                out.push_str(&format!(
                    "| {label} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.1}% | {:.3} |\n",
                    t.hyper_synthesis_ms,
                    t.parameter_calculation_ms,
                    t.latent_synthesis_ms,
                    t.entropy_decode_ms,
                    t.total_ms,
                    t.percent_param * 100.0,
                    t.mpps(),
                ));
            }
            out
        }
    }
}

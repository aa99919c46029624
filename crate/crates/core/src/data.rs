//! Deterministic synthetic training corpus.
//!
//! Images mix a linear gradient, a few soft step edges, and Gaussian-blurred
//! noise; all three carry strong local correlation, which is what spatial
//! context modeling exploits. Everything derives from one seed.

use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// A set of grayscale images of a common square size, values in [0, 1].
pub struct Corpus {
    pub images: Vec<Tensor>,
    pub size: usize,
}

pub fn synthetic_corpus(seed: u64, count: usize, size: usize) -> Corpus {
    let mut rng = SplitMix64::new(seed);
    let images = (0..count)
        .map(|i| {
            let mut img_rng = rng.fork(i as u64);
            Tensor::from_vec([1, 1, size, size], synth_plane(&mut img_rng, size, size))
                .expect("size checked")
        })
        .collect();
    Corpus { images, size }
}

/// One synthetic grayscale plane, row-major.
pub fn synth_plane(rng: &mut SplitMix64, h: usize, w: usize) -> Vec<f32> {
    let mut img = vec![0.0f32; h * w];

    // linear gradient
    let gx = rng.uniform(-0.5, 0.5);
    let gy = rng.uniform(-0.5, 0.5);
    let base = rng.uniform(0.25, 0.75);
    for r in 0..h {
        for c in 0..w {
            let u = c as f64 / w.max(1) as f64;
            let v = r as f64 / h.max(1) as f64;
            img[r * w + c] = (base + gx * (u - 0.5) + gy * (v - 0.5)) as f32;
        }
    }

    // soft step edges along random lines
    let edges = 1 + rng.below(3);
    for _ in 0..edges {
        let cx = rng.uniform(0.0, w as f64);
        let cy = rng.uniform(0.0, h as f64);
        let theta = rng.uniform(0.0, std::f64::consts::TAU);
        let (nx, ny) = (theta.cos(), theta.sin());
        let amp = rng.uniform(-0.35, 0.35);
        let softness = rng.uniform(0.8, 3.0);
        for r in 0..h {
            for c in 0..w {
                let d = (c as f64 - cx) * nx + (r as f64 - cy) * ny;
                let s = 1.0 / (1.0 + (-d / softness).exp());
                img[r * w + c] += (amp * (s - 0.5)) as f32;
            }
        }
    }

    // blurred noise
    let amp = rng.uniform(0.05, 0.2) as f32;
    let radius = 1 + rng.below(3);
    let mut noise: Vec<f32> = (0..h * w).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
    for _ in 0..3 {
        noise = box_blur(&noise, h, w, radius);
    }
    // renormalize blurred noise to unit-ish amplitude
    let peak = noise.iter().fold(0.0f32, |m, &v| m.max(v.abs())).max(1e-6);
    for (dst, &n) in img.iter_mut().zip(noise.iter()) {
        *dst = (*dst + amp * n / peak).clamp(0.0, 1.0);
    }
    img
}

fn box_blur(src: &[f32], h: usize, w: usize, radius: usize) -> Vec<f32> {
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f32;
    let mut tmp = vec![0.0f32; h * w];
    for row in 0..h as isize {
        for col in 0..w as isize {
            let mut acc = 0.0f32;
            for d in -r..=r {
                let c = (col + d).clamp(0, w as isize - 1);
                acc += src[(row * w as isize + c) as usize];
            }
            tmp[(row * w as isize + col) as usize] = acc * norm;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for row in 0..h as isize {
        for col in 0..w as isize {
            let mut acc = 0.0f32;
            for d in -r..=r {
                let rr = (row + d).clamp(0, h as isize - 1);
                acc += tmp[(rr * w as isize + col) as usize];
            }
            out[(row * w as isize + col) as usize] = acc * norm;
        }
    }
    out
}

impl Corpus {
    /// Assemble a batch of random square crops.
    pub fn batch(&self, rng: &mut SplitMix64, batch: usize, patch: usize) -> Tensor {
        assert!(patch <= self.size, "patch {patch} exceeds corpus size {}", self.size);
        let mut data = Vec::with_capacity(batch * patch * patch);
        for _ in 0..batch {
            let img = &self.images[rng.below(self.images.len())];
            let max_off = self.size - patch;
            let (oy, ox) = (
                if max_off == 0 { 0 } else { rng.below(max_off + 1) },
                if max_off == 0 { 0 } else { rng.below(max_off + 1) },
            );
            for r in 0..patch {
                let row = (oy + r) * self.size + ox;
                data.extend_from_slice(&img.data()[row..row + patch]);
            }
        }
        Tensor::from_vec([batch, 1, patch, patch], data).expect("sizes agree")
    }
}

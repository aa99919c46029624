//! Anchor/non-anchor spatial partitioning and the context-mask machinery.
//!
//! The fixed global convention: a latent position (row, col) is an *anchor*
//! iff `(row + col) % 2 == 0`. Anchors are coded first using the hyperprior
//! alone; non-anchors then see all four (or twelve, for 5x5 kernels) of
//! their checkerboard neighbours. The convention byte is written into every
//! bitstream header so files stay self-describing.

use crate::tensor::{Result, Shape, Tape, Tensor, TensorError};

/// Header byte for the parity convention used throughout this crate.
pub const PARITY_CONVENTION: u8 = 0;

/// True when (row, col) is an anchor position.
#[inline]
pub fn is_anchor(row: usize, col: usize) -> bool {
    (row + col) % 2 == 0
}

/// Number of anchors on an H x W grid: ceil(H*W / 2). Holds for odd
/// dimensions too, because (0,0) is an anchor.
pub fn anchor_count(h: usize, w: usize) -> usize {
    (h * w).div_ceil(2)
}

/// Context-mask patterns. `SingleRef` offsets are (dy, dx) relative to the
/// kernel center.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Serial,
    Checkerboard,
    SingleRef { dy: i32, dx: i32 },
    Random { seed: u64 },
    Zero,
    AllNeighbors3,
}

/// k x k binary pattern selecting the visible context positions of a masked
/// convolution. The center bit is always zero: a code never references
/// itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    k: usize,
    bits: Vec<u8>,
    kind: MaskKind,
}

/// Build a mask of the requested kind. `k` must be odd; `Random` draws each
/// non-center bit with probability 1/2 from a splitmix64 stream seeded by
/// the kind's seed.
pub fn make_mask(kind: MaskKind, k: usize) -> Result<Mask> {
    if k % 2 == 0 || k == 0 {
        return Err(TensorError::Contract {
            context: "make_mask",
            message: format!("kernel size must be odd, got {k}"),
        });
    }
    let r = (k / 2) as i32;
    let mut bits = vec![0u8; k * k];
    let mut rng = match kind {
        MaskKind::Random { seed } => Some(crate::rng::SplitMix64::new(seed)),
        _ => None,
    };
    for dy in -r..=r {
        for dx in -r..=r {
            let idx = ((dy + r) as usize) * k + (dx + r) as usize;
            if dy == 0 && dx == 0 {
                continue; // center stays zero
            }
            let on = match kind {
                MaskKind::Serial => dy < 0 || (dy == 0 && dx < 0),
                MaskKind::Checkerboard => (dy + dx).rem_euclid(2) == 1,
                MaskKind::SingleRef { dy: ry, dx: rx } => dy == ry && dx == rx,
                MaskKind::Random { .. } => rng.as_mut().unwrap().next_bool(),
                MaskKind::Zero => false,
                MaskKind::AllNeighbors3 => dy.abs() <= 1 && dx.abs() <= 1,
            };
            bits[idx] = on as u8;
        }
    }
    if let MaskKind::SingleRef { dy, dx } = kind {
        if dy.abs() > r || dx.abs() > r || (dy == 0 && dx == 0) {
            return Err(TensorError::Contract {
                context: "make_mask",
                message: format!("single_ref offset ({dy},{dx}) outside {k}x{k} kernel"),
            });
        }
    }
    Ok(Mask { k, bits, kind })
}

/// A mask with explicit bits (center forced to zero). Used by the random
/// mask laboratory to evaluate arbitrary patterns.
pub fn mask_from_bits(k: usize, bits: Vec<u8>, kind: MaskKind) -> Result<Mask> {
    if k % 2 == 0 || bits.len() != k * k {
        return Err(TensorError::Contract {
            context: "mask_from_bits",
            message: format!("need odd k and k*k bits, got k={k}, {} bits", bits.len()),
        });
    }
    let mut bits = bits;
    bits[(k / 2) * k + k / 2] = 0;
    Ok(Mask { k, bits, kind })
}

impl Mask {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    /// Number of referenced neighbours (ones in the mask).
    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn bit(&self, dy: i32, dx: i32) -> bool {
        let r = (self.k / 2) as i32;
        self.bits[((dy + r) as usize) * self.k + (dx + r) as usize] != 0
    }

    /// Re-center these bits inside a larger odd kernel (zero padding).
    pub fn embed(&self, k: usize) -> Result<Mask> {
        if k < self.k || k % 2 == 0 {
            return Err(TensorError::Contract {
                context: "Mask::embed",
                message: format!("cannot embed {}x{} mask in k={k}", self.k, self.k),
            });
        }
        let mut bits = vec![0u8; k * k];
        let off = (k - self.k) / 2;
        for y in 0..self.k {
            for x in 0..self.k {
                bits[(y + off) * k + (x + off)] = self.bits[y * self.k + x];
            }
        }
        Ok(Mask {
            k,
            bits,
            kind: self.kind,
        })
    }

    /// Expand to a weight-shaped {0,1} tensor so `mask ⊙ W` is an ordinary
    /// elementwise product.
    pub fn weight_mask(&self, out_c: usize, in_c: usize) -> Tensor {
        let kk = self.k * self.k;
        let mut data = vec![0.0f32; out_c * in_c * kk];
        for oc in 0..out_c {
            for ic in 0..in_c {
                for (i, &b) in self.bits.iter().enumerate() {
                    data[(oc * in_c + ic) * kk + i] = b as f32;
                }
            }
        }
        Tensor::with_node([out_c, in_c, self.k, self.k], data, None)
    }

    pub fn description(&self) -> String {
        match self.kind {
            MaskKind::Serial => format!("serial {}x{}", self.k, self.k),
            MaskKind::Checkerboard => format!("checkerboard {}x{}", self.k, self.k),
            MaskKind::SingleRef { dy, dx } => format!("single_ref({dy},{dx})"),
            MaskKind::Random { seed } => format!("random(seed={seed})"),
            MaskKind::Zero => "non-reference".to_string(),
            MaskKind::AllNeighbors3 => "all neighbours in 3x3".to_string(),
        }
    }
}

/// Masked convolution in reparameterized form: conv with effective weight
/// `mask ⊙ W` plus bias, stride 1, same-size padding. Gradients flow only
/// through unmasked taps.
pub fn masked_conv2d(
    tape: &mut Tape,
    input: &Tensor,
    weight: &Tensor,
    mask: &Mask,
    bias: &Tensor,
) -> Result<Tensor> {
    let wshape = weight.shape();
    if wshape[2] != mask.k() || wshape[3] != mask.k() {
        return Err(TensorError::Contract {
            context: "masked_conv2d",
            message: format!("mask size {} does not match kernel {:?}", mask.k(), wshape),
        });
    }
    let m = mask.weight_mask(wshape[0], wshape[1]);
    let effective = tape.mul(weight, &m)?;
    tape.conv2d(input, &effective, bias, 1, mask.k() / 2)
}

/// Parity multiplexer on plain tensors: anchors from `alpha`, non-anchors
/// from `beta`.
pub fn mux(alpha: &Tensor, beta: &Tensor) -> Result<Tensor> {
    Tape::no_grad().mux(alpha, beta)
}

/// ŷ_half: latents with every non-anchor zeroed.
pub fn half(y: &Tensor) -> Result<Tensor> {
    mux(y, &Tensor::zeros(y.shape()))
}

/// Bias map: every spatial position carries the same channel vector.
pub fn make_b_map(bias: &[f32], h: usize, w: usize) -> Tensor {
    let c = bias.len();
    let mut data = vec![0.0f32; c * h * w];
    for (ci, &b) in bias.iter().enumerate() {
        for v in &mut data[ci * h * w..(ci + 1) * h * w] {
            *v = b;
        }
    }
    Tensor::with_node([1, c, h, w], data, None)
}

/// b_half: the bias map restricted to anchor positions (zero elsewhere).
pub fn make_b_half(bias: &[f32], h: usize, w: usize) -> Tensor {
    let b_map = make_b_map(bias, h, w);
    mux(&b_map, &Tensor::zeros(b_map.shape())).expect("shapes match by construction")
}

pub fn space_to_depth(x: &Tensor) -> Result<Tensor> {
    Tape::no_grad().space_to_depth(x)
}

pub fn depth_to_space(x: &Tensor) -> Result<Tensor> {
    Tape::no_grad().depth_to_space(x)
}

/// Split a tensor into dense anchor and non-anchor chunks, each of shape
/// (B, C, H/2, W). Values are taken in row-major scan order per channel and
/// packed row-major; `merge` is the exact inverse.
pub fn demux(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Contract {
            context: "demux",
            message: format!("spatial dims must be even, got {h}x{w}"),
        });
    }
    let oshape: Shape = [n, c, h / 2, w];
    let plane = h * w;
    let half_plane = plane / 2;
    let mut anchors = vec![0.0f32; n * c * half_plane];
    let mut non_anchors = vec![0.0f32; n * c * half_plane];
    for img in 0..n * c {
        let src = &x.data()[img * plane..][..plane];
        let dst_a = &mut anchors[img * half_plane..][..half_plane];
        let dst_n = &mut non_anchors[img * half_plane..][..half_plane];
        let mut ai = 0;
        let mut ni = 0;
        for r in 0..h {
            for col in 0..w {
                let v = src[r * w + col];
                if is_anchor(r, col) {
                    dst_a[ai] = v;
                    ai += 1;
                } else {
                    dst_n[ni] = v;
                    ni += 1;
                }
            }
        }
    }
    Ok((
        Tensor::with_node(oshape, anchors, None),
        Tensor::with_node(oshape, non_anchors, None),
    ))
}

/// Inverse of `demux`.
pub fn merge(anchors: &Tensor, non_anchors: &Tensor) -> Result<Tensor> {
    if anchors.shape() != non_anchors.shape() {
        return Err(TensorError::ShapeMismatch {
            context: "merge",
            lhs: anchors.shape(),
            rhs: non_anchors.shape(),
        });
    }
    let [n, c, h2, w] = anchors.shape();
    if w % 2 != 0 {
        return Err(TensorError::Contract {
            context: "merge",
            message: format!("width must be even, got {w}"),
        });
    }
    let h = h2 * 2;
    let plane = h * w;
    let half_plane = plane / 2;
    let mut out = vec![0.0f32; n * c * plane];
    for img in 0..n * c {
        let src_a = &anchors.data()[img * half_plane..][..half_plane];
        let src_n = &non_anchors.data()[img * half_plane..][..half_plane];
        let dst = &mut out[img * plane..][..plane];
        let mut ai = 0;
        let mut ni = 0;
        for r in 0..h {
            for col in 0..w {
                dst[r * w + col] = if is_anchor(r, col) {
                    let v = src_a[ai];
                    ai += 1;
                    v
                } else {
                    let v = src_n[ni];
                    ni += 1;
                    v
                };
            }
        }
    }
    Ok(Tensor::with_node([n, c, h, w], out, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn random_tensor(rng: &mut SplitMix64, shape: Shape) -> Tensor {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.uniform(-2.0, 2.0) as f32)
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn mask_reference_counts() {
        assert_eq!(make_mask(MaskKind::Zero, 5).unwrap().count_ones(), 0);
        assert_eq!(make_mask(MaskKind::Serial, 3).unwrap().count_ones(), 4);
        assert_eq!(make_mask(MaskKind::Serial, 5).unwrap().count_ones(), 12);
        assert_eq!(make_mask(MaskKind::Checkerboard, 3).unwrap().count_ones(), 4);
        assert_eq!(make_mask(MaskKind::Checkerboard, 5).unwrap().count_ones(), 12);
        assert_eq!(make_mask(MaskKind::AllNeighbors3, 3).unwrap().count_ones(), 8);
    }

    #[test]
    fn checkerboard3_positions() {
        let m = make_mask(MaskKind::Checkerboard, 3).unwrap();
        assert_eq!(m.bits(), &[0, 1, 0, 1, 0, 1, 0, 1, 0]);
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(make_mask(MaskKind::Serial, 4).is_err());
    }

    #[test]
    fn random_mask_is_seeded_and_centerless() {
        let a = make_mask(MaskKind::Random { seed: 9 }, 5).unwrap();
        let b = make_mask(MaskKind::Random { seed: 9 }, 5).unwrap();
        let c = make_mask(MaskKind::Random { seed: 10 }, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.bits(), c.bits());
        assert!(!a.bit(0, 0));
    }

    #[test]
    fn random_mask_bits_are_equiprobable() {
        let mut on = vec![0u32; 25];
        let n = 10_000;
        for seed in 0..n {
            let m = make_mask(MaskKind::Random { seed }, 5).unwrap();
            for (i, &b) in m.bits().iter().enumerate() {
                on[i] += b as u32;
            }
        }
        for (i, &cnt) in on.iter().enumerate() {
            if i == 12 {
                assert_eq!(cnt, 0); // center
            } else {
                let frac = cnt as f64 / n as f64;
                assert!((frac - 0.5).abs() < 0.02, "bit {i}: {frac}");
            }
        }
    }

    #[test]
    fn zero_mask_conv_outputs_bias() {
        let mut rng = SplitMix64::new(1);
        let x = random_tensor(&mut rng, [1, 2, 4, 4]);
        let w = random_tensor(&mut rng, [3, 2, 5, 5]);
        let bias = Tensor::from_vec([1, 3, 1, 1], vec![0.3, -0.7, 1.1]).unwrap();
        let mask = make_mask(MaskKind::Zero, 5).unwrap();
        let mut tape = Tape::no_grad();
        let y = masked_conv2d(&mut tape, &x, &w, &mask, &bias).unwrap();
        for c in 0..3 {
            for r in 0..4 {
                for col in 0..4 {
                    assert_eq!(y.at(0, c, r, col), bias.data()[c]);
                }
            }
        }
    }

    #[test]
    fn anchor_bias_identity_for_checkerboard_masks() {
        // masked_conv2d(y_half) equals the bias exactly at every anchor
        let mut rng = SplitMix64::new(2);
        for &k in &[3usize, 5] {
            for trial in 0..50 {
                let (h, w) = (4 + (trial % 3) * 2, 6 + (trial % 2) * 2);
                let x = random_tensor(&mut rng, [1, 2, h, w]);
                let y_half = half(&x).unwrap();
                let weight = random_tensor(&mut rng, [2, 2, k, k]);
                let bias = Tensor::from_vec([1, 2, 1, 1], vec![0.25, -1.5]).unwrap();
                let mask = make_mask(MaskKind::Checkerboard, k).unwrap();
                let mut tape = Tape::no_grad();
                let out = masked_conv2d(&mut tape, &y_half, &weight, &mask, &bias).unwrap();
                for c in 0..2 {
                    for r in 0..h {
                        for col in 0..w {
                            if is_anchor(r, col) {
                                assert_eq!(
                                    out.at(0, c, r, col),
                                    bias.data()[c],
                                    "k={k} at ({r},{col})"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn single_ref_shifts_input() {
        // mask with only (-1, 0) set and identity weight reproduces the
        // upper neighbour, zero on the top row
        let x = Tensor::from_vec([1, 1, 3, 3], vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        let w = Tensor::full([1, 1, 3, 3], 1.0);
        let bias = Tensor::zeros([1, 1, 1, 1]);
        let mask = make_mask(MaskKind::SingleRef { dy: -1, dx: 0 }, 3).unwrap();
        let mut tape = Tape::no_grad();
        let y = masked_conv2d(&mut tape, &x, &w, &mask, &bias).unwrap();
        assert_eq!(y.data(), &[0., 0., 0., 1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn mux_parity_pattern() {
        let a = Tensor::full([1, 1, 2, 2], 1.0);
        let b = Tensor::full([1, 1, 2, 2], 2.0);
        let m = mux(&a, &b).unwrap();
        assert_eq!(m.data(), &[1., 2., 2., 1.]);

        let mut rng = SplitMix64::new(3);
        let x = random_tensor(&mut rng, [2, 3, 5, 4]);
        assert_eq!(mux(&x, &x).unwrap().data(), x.data());
    }

    #[test]
    fn half_zeroes_non_anchors_only() {
        let mut rng = SplitMix64::new(4);
        let y = random_tensor(&mut rng, [1, 2, 4, 6]);
        let yh = half(&y).unwrap();
        for c in 0..2 {
            for r in 0..4 {
                for col in 0..6 {
                    let expect = if is_anchor(r, col) { y.at(0, c, r, col) } else { 0.0 };
                    assert_eq!(yh.at(0, c, r, col), expect);
                }
            }
        }
    }

    #[test]
    fn b_half_examples() {
        let bh = make_b_half(&[0.5], 2, 2);
        assert_eq!(bh.data(), &[0.5, 0.0, 0.0, 0.5]);

        // sum over all elements = ceil(HW/2) * sum(bias)
        let bias = [0.5f32, -1.0, 2.0];
        for &(h, w) in &[(3usize, 3usize), (4, 6), (5, 4)] {
            let bh = make_b_half(&bias, h, w);
            let total: f32 = bh.data().iter().sum();
            let expect = anchor_count(h, w) as f32 * bias.iter().sum::<f32>();
            assert!((total - expect).abs() < 1e-4);
        }

        // definitional: b_half == mux(b_map, 0)
        let bm = make_b_map(&bias, 4, 4);
        let bh = make_b_half(&bias, 4, 4);
        let via_mux = mux(&bm, &Tensor::zeros(bm.shape())).unwrap();
        assert_eq!(bh.data(), via_mux.data());
    }

    #[test]
    fn space_to_depth_layout() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let packed = space_to_depth(&x).unwrap();
        assert_eq!(packed.shape(), [1, 4, 1, 1]);
        assert_eq!(packed.data(), &[1., 2., 3., 4.]);

        let x3 = Tensor::zeros([1, 3, 4, 4]);
        assert_eq!(space_to_depth(&x3).unwrap().shape(), [1, 12, 2, 2]);
        assert!(space_to_depth(&Tensor::zeros([1, 1, 3, 4])).is_err());
    }

    #[test]
    fn demux_2x2_layout() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let (a, n) = demux(&x).unwrap();
        assert_eq!(a.shape(), [1, 1, 1, 2]);
        assert_eq!(a.data(), &[1., 4.]); // anchors (0,0) and (1,1)
        assert_eq!(n.data(), &[2., 3.]); // non-anchors (0,1) and (1,0)
    }

    #[test]
    fn demux_merge_roundtrip_exhaustive() {
        // positions encoded as unique values so any misplacement is caught
        let [n, c, h, w] = [1usize, 4usize, 6usize, 8usize];
        let data: Vec<f32> = (0..n * c * h * w).map(|i| i as f32).collect();
        let x = Tensor::from_vec([n, c, h, w], data).unwrap();
        let (a, na) = demux(&x).unwrap();
        assert_eq!(a.numel(), n * c * h * w / 2);
        let back = merge(&a, &na).unwrap();
        assert_eq!(back.data(), x.data());
        // and anchors feed back to anchor positions
        let merged_a = merge(&a, &Tensor::zeros(a.shape())).unwrap();
        for row in 0..h {
            for col in 0..w {
                if is_anchor(row, col) {
                    assert_eq!(merged_a.at(0, 2, row, col), x.at(0, 2, row, col));
                } else {
                    assert_eq!(merged_a.at(0, 2, row, col), 0.0);
                }
            }
        }
    }

    #[test]
    fn merge_zero_cases() {
        let z = Tensor::zeros([1, 2, 2, 4]);
        let m = merge(&z, &z).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        assert!(merge(&z, &Tensor::zeros([1, 2, 2, 2])).is_err());
    }

    #[test]
    fn anchor_count_odd_dims() {
        assert_eq!(anchor_count(2, 2), 2);
        assert_eq!(anchor_count(3, 3), 5);
        assert_eq!(anchor_count(5, 7), 18);
        assert_eq!(anchor_count(1, 1), 1);
    }

    #[test]
    fn causality_by_perturbation() {
        // changing a position the decode schedule has not yet revealed must
        // leave the masked-conv output at p exactly unchanged
        let mut rng = SplitMix64::new(8);
        let (h, w) = (6, 6);
        let y = random_tensor(&mut rng, [1, 1, h, w]);
        let weight = random_tensor(&mut rng, [1, 1, 5, 5]);
        let bias = Tensor::zeros([1, 1, 1, 1]);

        let eval = |mask: &Mask, input: &Tensor| -> Tensor {
            let mut tape = Tape::no_grad();
            masked_conv2d(&mut tape, input, &weight, mask, &bias).unwrap()
        };

        // serial: output at p reads only raster-before positions
        let serial = make_mask(MaskKind::Serial, 5).unwrap();
        let base = eval(&serial, &y);
        let (pr, pc) = (2, 3);
        for r in 0..h {
            for c in 0..w {
                if r > pr || (r == pr && c >= pc) {
                    let mut data = y.to_vec();
                    data[r * w + c] += 7.5;
                    let pert = Tensor::from_vec(y.shape(), data).unwrap();
                    let out = eval(&serial, &pert);
                    assert_eq!(out.at(0, 0, pr, pc), base.at(0, 0, pr, pc));
                }
            }
        }

        // checkerboard: the conv sees mux(y, 0), so non-anchor outputs are
        // invariant to any non-anchor change
        let cb = make_mask(MaskKind::Checkerboard, 5).unwrap();
        let y_half = half(&y).unwrap();
        let base = eval(&cb, &y_half);
        for r in 0..h {
            for c in 0..w {
                if !is_anchor(r, c) {
                    let mut data = y.to_vec();
                    data[r * w + c] -= 3.25;
                    let pert = half(&Tensor::from_vec(y.shape(), data).unwrap()).unwrap();
                    let out = eval(&cb, &pert);
                    for (a, b) in out.data().iter().zip(base.data().iter()) {
                        assert_eq!(a, b);
                    }
                }
            }
        }

        // single_ref: only the referenced offset matters
        let sr = make_mask(MaskKind::SingleRef { dy: 1, dx: -2 }, 5).unwrap();
        let base = eval(&sr, &y);
        let (pr, pc) = (3, 3);
        for r in 0..h {
            for c in 0..w {
                if (r as i32 - pr as i32, c as i32 - pc as i32) != (1, -2) {
                    let mut data = y.to_vec();
                    data[r * w + c] += 1.0;
                    let pert = Tensor::from_vec(y.shape(), data).unwrap();
                    let out = eval(&sr, &pert);
                    assert_eq!(out.at(0, 0, pr, pc), base.at(0, 0, pr, pc));
                }
            }
        }
    }

    #[test]
    fn masked_conv_gradient_blocked_by_mask() {
        let mut rng = SplitMix64::new(12);
        let x = random_tensor(&mut rng, [1, 1, 4, 4]);
        let w = random_tensor(&mut rng, [1, 1, 3, 3]);
        let bias = Tensor::zeros([1, 1, 1, 1]);
        let mask = make_mask(MaskKind::Checkerboard, 3).unwrap();
        let mut tape = Tape::new();
        let wl = tape.leaf(&w);
        let bl = tape.leaf(&bias);
        let y = masked_conv2d(&mut tape, &x, &wl, &mask, &bl).unwrap();
        let loss = tape.sum(&y);
        let grads = tape.backward(&loss).unwrap();
        let gw = grads.get(&wl).unwrap();
        for (i, &b) in mask.bits().iter().enumerate() {
            if b == 0 {
                assert_eq!(gw[i], 0.0, "masked tap {i} received gradient");
            }
        }
    }

    #[test]
    fn embed_preserves_count() {
        let m3 = make_mask(MaskKind::Checkerboard, 3).unwrap();
        let m5 = m3.embed(5).unwrap();
        assert_eq!(m5.k(), 5);
        assert_eq!(m5.count_ones(), 4);
        assert!(m5.bit(-1, 0) && m5.bit(0, 1));
        assert!(!m5.bit(-2, 0));
    }

    proptest! {
        #[test]
        fn s2d_d2s_roundtrip(n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
            let shape = [n, c, h * 2, w * 2];
            let mut rng = SplitMix64::new(seed);
            let data: Vec<f32> = (0..shape.iter().product::<usize>())
                .map(|_| rng.uniform(-10.0, 10.0) as f32)
                .collect();
            let x = Tensor::from_vec(shape, data).unwrap();
            let packed = space_to_depth(&x).unwrap();
            prop_assert_eq!(packed.shape()[1], c * 4);
            let back = depth_to_space(&packed).unwrap();
            prop_assert_eq!(back.data(), x.data());
        }

        #[test]
        fn demux_merge_roundtrip(n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
            let shape = [n, c, h * 2, w * 2];
            let mut rng = SplitMix64::new(seed);
            let data: Vec<f32> = (0..shape.iter().product::<usize>())
                .map(|_| rng.uniform(-10.0, 10.0) as f32)
                .collect();
            let x = Tensor::from_vec(shape, data).unwrap();
            let (a, na) = demux(&x).unwrap();
            let back = merge(&a, &na).unwrap();
            prop_assert_eq!(back.data(), x.data());
        }
    }
}

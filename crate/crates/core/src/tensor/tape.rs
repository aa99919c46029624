//! Operation tape and reverse-mode differentiation.
//!
//! Ops append nodes in execution order, so the tape is already topologically
//! sorted; `backward` walks it once in reverse. A node stores clones of the
//! input tensors it needs for its backward rule (cheap: buffers are shared).

use super::kernels;
use super::{Result, Shape, Tensor, TensorError};
use crate::gauss;

enum Op {
    Leaf {
        data: Tensor,
    },
    Conv2d {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
        oshape: Shape,
    },
    ConvTranspose2d {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
        oshape: Shape,
    },
    LeakyRelu {
        input: Tensor,
        slope: f32,
    },
    Add {
        a: Tensor,
        b: Tensor,
    },
    Sub {
        a: Tensor,
        b: Tensor,
    },
    Mul {
        a: Tensor,
        b: Tensor,
    },
    Div {
        a: Tensor,
        b: Tensor,
    },
    AddScalar {
        a: Tensor,
        c: f32,
    },
    MulScalar {
        a: Tensor,
        c: f32,
    },
    Softplus {
        a: Tensor,
    },
    Ln {
        a: Tensor,
    },
    ClampMin {
        a: Tensor,
        min: f32,
    },
    NormalCdf {
        a: Tensor,
    },
    Sum {
        a: Tensor,
    },
    MuxParity {
        a: Tensor,
        b: Tensor,
    },
    SpaceToDepth {
        a: Tensor,
    },
    DepthToSpace {
        a: Tensor,
    },
    ConcatChannels {
        a: Tensor,
        b: Tensor,
    },
    BroadcastChannels {
        a: Tensor,
        oshape: Shape,
    },
    SliceChannels {
        a: Tensor,
        from: usize,
        len: usize,
    },
    RepeatChannels {
        a: Tensor,
        times: usize,
    },
}

struct Node {
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by tape node.
pub struct Gradients {
    by_node: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `t`, if `t` is a tracked leaf that the
    /// loss depends on. Disconnected leaves have zero gradient (None).
    pub fn get(&self, t: &Tensor) -> Option<&[f32]> {
        t.node()
            .and_then(|id| self.by_node.get(id))
            .and_then(|g| g.as_deref())
    }
}

/// Records forward operations and replays them backward.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A tape that records gradients.
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that runs the identical forward arithmetic without recording.
    pub fn no_grad() -> Tape {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all recorded nodes; the tape can be reused.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Register a differentiable input. Returns a tensor tied to this tape.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let mut out = t.detach();
        if self.recording {
            self.nodes.push(Node {
                op: Op::Leaf { data: t.detach() },
            });
            out.set_node(Some(self.nodes.len() - 1));
        }
        out
    }

    fn record(&mut self, tracked: bool, op: impl FnOnce() -> Op) -> Option<usize> {
        if self.recording && tracked {
            self.nodes.push(Node { op: op() });
            Some(self.nodes.len() - 1)
        } else {
            None
        }
    }

    fn tracked(inputs: &[&Tensor]) -> bool {
        inputs.iter().any(|t| t.node().is_some())
    }

    // ---- convolution ----

    /// 2-D convolution, NCHW. `weight` is [outC, inC, k, k] with odd k;
    /// `bias` is [1, outC, 1, 1].
    pub fn conv2d(
        &mut self,
        input: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let ishape = input.shape();
        let wshape = weight.shape();
        if ishape[1] != wshape[1] {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d: input channels vs weight inC",
                lhs: ishape,
                rhs: wshape,
            });
        }
        if wshape[2] % 2 == 0 || wshape[2] != wshape[3] {
            return Err(TensorError::Contract {
                context: "conv2d",
                message: format!("kernel must be square and odd, got {:?}", wshape),
            });
        }
        if stride == 0 {
            return Err(TensorError::Contract {
                context: "conv2d",
                message: "stride must be positive".into(),
            });
        }
        if bias.numel() != wshape[0] {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d: bias vs weight outC",
                lhs: bias.shape(),
                rhs: wshape,
            });
        }
        if ishape[2] + 2 * padding < wshape[2] || ishape[3] + 2 * padding < wshape[3] {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d: input smaller than kernel",
                lhs: ishape,
                rhs: wshape,
            });
        }
        let (data, oshape) = kernels::conv2d(
            input.data(),
            &ishape,
            weight.data(),
            &wshape,
            bias.data(),
            stride,
            padding,
        );
        let node = self.record(Self::tracked(&[input, weight, bias]), || Op::Conv2d {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
            stride,
            padding,
            oshape,
        });
        Ok(Tensor::with_node(oshape, data, node))
    }

    /// Transposed 2-D convolution (adjoint of `conv2d` for the same weight).
    /// `weight` is [inC, outC, k, k] where inC matches the input channels.
    pub fn conv2d_transposed(
        &mut self,
        input: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let ishape = input.shape();
        let wshape = weight.shape();
        if ishape[1] != wshape[0] {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d_transposed: input channels vs weight dim 0",
                lhs: ishape,
                rhs: wshape,
            });
        }
        if wshape[2] % 2 == 0 || wshape[2] != wshape[3] {
            return Err(TensorError::Contract {
                context: "conv2d_transposed",
                message: format!("kernel must be square and odd, got {:?}", wshape),
            });
        }
        if stride == 0 {
            return Err(TensorError::Contract {
                context: "conv2d_transposed",
                message: "stride must be positive".into(),
            });
        }
        let out_c = wshape[1];
        if bias.numel() != out_c {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d_transposed: bias vs weight outC",
                lhs: bias.shape(),
                rhs: wshape,
            });
        }
        let k = wshape[2];
        let oh = kernels::convt_out_dim(ishape[2], k, stride, padding);
        let ow = kernels::convt_out_dim(ishape[3], k, stride, padding);
        let oshape = [ishape[0], out_c, oh, ow];
        let mut data = kernels::conv2d_input_grad(
            input.data(),
            &ishape,
            weight.data(),
            &wshape,
            stride,
            padding,
            &oshape,
        );
        // per-channel bias
        let plane = oh * ow;
        for b in 0..oshape[0] {
            for oc in 0..out_c {
                let bias_v = bias.data()[oc];
                for v in &mut data[(b * out_c + oc) * plane..][..plane] {
                    *v += bias_v;
                }
            }
        }
        let node = self.record(Self::tracked(&[input, weight, bias]), || {
            Op::ConvTranspose2d {
                input: input.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
                stride,
                padding,
                oshape,
            }
        });
        Ok(Tensor::with_node(oshape, data, node))
    }

    // ---- elementwise ----

    pub fn leaky_relu(&mut self, input: &Tensor, slope: f32) -> Result<Tensor> {
        if !(0.0..1.0).contains(&slope) {
            return Err(TensorError::Contract {
                context: "leaky_relu",
                message: format!("slope must be in [0, 1), got {slope}"),
            });
        }
        let data = input
            .data()
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let node = self.record(Self::tracked(&[input]), || Op::LeakyRelu {
            input: input.clone(),
            slope,
        });
        Ok(Tensor::with_node(input.shape(), data, node))
    }

    fn binop(
        &mut self,
        context: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f32, f32) -> f32,
        op: impl FnOnce(Tensor, Tensor) -> Op,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                context,
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let data = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let node = self.record(Self::tracked(&[a, b]), || op(a.clone(), b.clone()));
        Ok(Tensor::with_node(a.shape(), data, node))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binop("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binop("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binop("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binop("div", a, b, |x, y| x / y, |a, b| Op::Div { a, b })
    }

    fn unop(
        &mut self,
        a: &Tensor,
        f: impl Fn(f32) -> f32,
        op: impl FnOnce(Tensor) -> Op,
    ) -> Tensor {
        let data = a.data().iter().map(|&x| f(x)).collect();
        let node = self.record(Self::tracked(&[a]), || op(a.clone()));
        Tensor::with_node(a.shape(), data, node)
    }

    pub fn add_scalar(&mut self, a: &Tensor, c: f32) -> Tensor {
        self.unop(a, |x| x + c, |a| Op::AddScalar { a, c })
    }

    pub fn mul_scalar(&mut self, a: &Tensor, c: f32) -> Tensor {
        self.unop(a, |x| x * c, |a| Op::MulScalar { a, c })
    }

    pub fn softplus(&mut self, a: &Tensor) -> Tensor {
        self.unop(a, softplus_f32, |a| Op::Softplus { a })
    }

    pub fn ln(&mut self, a: &Tensor) -> Tensor {
        self.unop(a, |x| x.ln(), |a| Op::Ln { a })
    }

    pub fn clamp_min(&mut self, a: &Tensor, min: f32) -> Tensor {
        self.unop(a, |x| x.max(min), |a| Op::ClampMin { a, min })
    }

    /// Standard normal CDF, elementwise (f64 internally).
    pub fn normal_cdf(&mut self, a: &Tensor) -> Tensor {
        self.unop(
            a,
            |x| gauss::normal_cdf(x as f64) as f32,
            |a| Op::NormalCdf { a },
        )
    }

    // ---- reductions and layout ----

    /// Sum of all elements as a [1,1,1,1] tensor (f64 accumulation).
    pub fn sum(&mut self, a: &Tensor) -> Tensor {
        let total: f64 = a.data().iter().map(|&v| v as f64).sum();
        let node = self.record(Self::tracked(&[a]), || Op::Sum { a: a.clone() });
        Tensor::with_node([1, 1, 1, 1], vec![total as f32], node)
    }

    /// Mean of all elements as a [1,1,1,1] tensor.
    pub fn mean(&mut self, a: &Tensor) -> Tensor {
        let n = a.numel().max(1);
        let s = self.sum(a);
        self.mul_scalar(&s, 1.0 / n as f32)
    }

    /// Parity multiplexer: anchors ((h+w) even) from `a`, non-anchors from `b`.
    pub fn mux(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                context: "mux",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let data = kernels::mux_parity(a.data(), b.data(), &a.shape());
        let node = self.record(Self::tracked(&[a, b]), || Op::MuxParity {
            a: a.clone(),
            b: b.clone(),
        });
        Ok(Tensor::with_node(a.shape(), data, node))
    }

    pub fn space_to_depth(&mut self, a: &Tensor) -> Result<Tensor> {
        let [_, _, h, w] = a.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Contract {
                context: "space_to_depth",
                message: format!("spatial dims must be even, got {h}x{w}"),
            });
        }
        let (data, oshape) = kernels::space_to_depth(a.data(), &a.shape());
        let node = self.record(Self::tracked(&[a]), || Op::SpaceToDepth { a: a.clone() });
        Ok(Tensor::with_node(oshape, data, node))
    }

    pub fn depth_to_space(&mut self, a: &Tensor) -> Result<Tensor> {
        let [_, c, _, _] = a.shape();
        if c % 4 != 0 {
            return Err(TensorError::Contract {
                context: "depth_to_space",
                message: format!("channel count must be divisible by 4, got {c}"),
            });
        }
        let (data, oshape) = kernels::depth_to_space(a.data(), &a.shape());
        let node = self.record(Self::tracked(&[a]), || Op::DepthToSpace { a: a.clone() });
        Ok(Tensor::with_node(oshape, data, node))
    }

    pub fn concat_channels(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let [an, ac, ah, aw] = a.shape();
        let [bn, bc, bh, bw] = b.shape();
        if an != bn || ah != bh || aw != bw {
            return Err(TensorError::ShapeMismatch {
                context: "concat_channels",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let oshape = [an, ac + bc, ah, aw];
        let plane = ah * aw;
        let mut data = vec![0.0f32; an * (ac + bc) * plane];
        for n in 0..an {
            let dst = &mut data[n * (ac + bc) * plane..][..(ac + bc) * plane];
            dst[..ac * plane].copy_from_slice(&a.data()[n * ac * plane..][..ac * plane]);
            dst[ac * plane..].copy_from_slice(&b.data()[n * bc * plane..][..bc * plane]);
        }
        let node = self.record(Self::tracked(&[a, b]), || Op::ConcatChannels {
            a: a.clone(),
            b: b.clone(),
        });
        Ok(Tensor::with_node(oshape, data, node))
    }

    /// Contiguous channel slice [from, from+len).
    pub fn slice_channels(&mut self, a: &Tensor, from: usize, len: usize) -> Result<Tensor> {
        let [n, c, h, w] = a.shape();
        if from + len > c || len == 0 {
            return Err(TensorError::Contract {
                context: "slice_channels",
                message: format!("slice [{from}, {}) out of {c} channels", from + len),
            });
        }
        let plane = h * w;
        let mut data = vec![0.0f32; n * len * plane];
        for b in 0..n {
            data[b * len * plane..][..len * plane]
                .copy_from_slice(&a.data()[(b * c + from) * plane..][..len * plane]);
        }
        let node = self.record(Self::tracked(&[a]), || Op::SliceChannels {
            a: a.clone(),
            from,
            len,
        });
        Ok(Tensor::with_node([n, len, h, w], data, node))
    }

    /// Tile the channel dimension `times` times.
    pub fn repeat_channels(&mut self, a: &Tensor, times: usize) -> Result<Tensor> {
        if times == 0 {
            return Err(TensorError::Contract {
                context: "repeat_channels",
                message: "times must be positive".into(),
            });
        }
        let [n, c, h, w] = a.shape();
        let plane = h * w;
        let mut data = vec![0.0f32; n * c * times * plane];
        for b in 0..n {
            for t in 0..times {
                data[(b * times + t) * c * plane..][..c * plane]
                    .copy_from_slice(&a.data()[b * c * plane..][..c * plane]);
            }
        }
        let node = self.record(Self::tracked(&[a]), || Op::RepeatChannels {
            a: a.clone(),
            times,
        });
        Ok(Tensor::with_node([n, c * times, h, w], data, node))
    }

    /// Broadcast a [1, C, 1, 1] tensor over batch and spatial dims.
    pub fn broadcast_channels(&mut self, a: &Tensor, oshape: Shape) -> Result<Tensor> {
        let [an, ac, ah, aw] = a.shape();
        if an != 1 || ah != 1 || aw != 1 || ac != oshape[1] {
            return Err(TensorError::ShapeMismatch {
                context: "broadcast_channels",
                lhs: a.shape(),
                rhs: oshape,
            });
        }
        let [n, c, h, w] = oshape;
        let mut data = vec![0.0f32; n * c * h * w];
        for b in 0..n {
            for ci in 0..c {
                let v = a.data()[ci];
                for x in &mut data[(b * c + ci) * h * w..][..h * w] {
                    *x = v;
                }
            }
        }
        let node = self.record(Self::tracked(&[a]), || Op::BroadcastChannels {
            a: a.clone(),
            oshape,
        });
        Ok(Tensor::with_node(oshape, data, node))
    }

    // ---- reverse pass ----

    /// Propagate d(loss)/d(node) to every tracked leaf. `loss` must be a
    /// scalar recorded on this tape.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let loss_id = loss.node().ok_or(TensorError::Contract {
            context: "backward",
            message: "loss is not recorded on this tape".into(),
        })?;
        if loss.numel() != 1 {
            return Err(TensorError::Contract {
                context: "backward",
                message: format!("loss must be scalar, got shape {:?}", loss.shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss_id] = Some(vec![1.0]);
        for id in (0..=loss_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf { .. }) {
                grads[id] = Some(g);
                continue;
            }
            node.op.backward(&g, &mut grads);
        }
        Ok(Gradients { by_node: grads })
    }

    /// Re-evaluate the recorded graph up to `output` in f64, with the data of
    /// selected leaf nodes replaced. Used by gradient checking so that finite
    /// differences are not drowned in f32 storage rounding. Panics if
    /// `output` is not recorded on this tape.
    pub(crate) fn replay_f64(&self, output: usize, overrides: &[(usize, &[f64])]) -> Vec<f64> {
        let mut values: Vec<Option<Vec<f64>>> = Vec::new();
        values.resize_with(output + 1, || None);
        for (id, node) in self.nodes.iter().take(output + 1).enumerate() {
            let get = |t: &Tensor| -> Vec<f64> {
                match t.node() {
                    Some(nid) if nid <= output => values[nid]
                        .clone()
                        .expect("replay visited node before its input"),
                    _ => t.data().iter().map(|&v| v as f64).collect(),
                }
            };
            let v = match &node.op {
                Op::Leaf { data } => overrides
                    .iter()
                    .find(|(oid, _)| *oid == id)
                    .map(|(_, d)| d.to_vec())
                    .unwrap_or_else(|| data.data().iter().map(|&v| v as f64).collect()),
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                    ..
                } => f64_ops::conv2d(
                    &get(input),
                    &input.shape(),
                    &get(weight),
                    &weight.shape(),
                    &get(bias),
                    *stride,
                    *padding,
                ),
                Op::ConvTranspose2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                    oshape,
                } => f64_ops::conv2d_transposed(
                    &get(input),
                    &input.shape(),
                    &get(weight),
                    &weight.shape(),
                    &get(bias),
                    *stride,
                    *padding,
                    oshape,
                ),
                Op::LeakyRelu { input, slope } => get(input)
                    .iter()
                    .map(|&x| if x >= 0.0 { x } else { *slope as f64 * x })
                    .collect(),
                Op::Add { a, b } => zip(&get(a), &get(b), |x, y| x + y),
                Op::Sub { a, b } => zip(&get(a), &get(b), |x, y| x - y),
                Op::Mul { a, b } => zip(&get(a), &get(b), |x, y| x * y),
                Op::Div { a, b } => zip(&get(a), &get(b), |x, y| x / y),
                Op::AddScalar { a, c } => get(a).iter().map(|&x| x + *c as f64).collect(),
                Op::MulScalar { a, c } => get(a).iter().map(|&x| x * *c as f64).collect(),
                Op::Softplus { a } => get(a)
                    .iter()
                    .map(|&x| {
                        if x > 30.0 {
                            x
                        } else if x < -30.0 {
                            x.exp()
                        } else {
                            x.exp().ln_1p()
                        }
                    })
                    .collect(),
                Op::Ln { a } => get(a).iter().map(|&x| x.ln()).collect(),
                Op::ClampMin { a, min } => {
                    get(a).iter().map(|&x| x.max(*min as f64)).collect()
                }
                Op::NormalCdf { a } => get(a).iter().map(|&x| gauss::normal_cdf(x)).collect(),
                Op::Sum { a } => vec![get(a).iter().sum()],
                Op::MuxParity { a, b } => {
                    f64_ops::mux_parity(&get(a), &get(b), &a.shape())
                }
                Op::SpaceToDepth { a } => f64_ops::space_to_depth(&get(a), &a.shape()),
                Op::DepthToSpace { a } => f64_ops::depth_to_space(&get(a), &a.shape()),
                Op::ConcatChannels { a, b } => {
                    f64_ops::concat_channels(&get(a), &a.shape(), &get(b), &b.shape())
                }
                Op::BroadcastChannels { a, oshape } => {
                    f64_ops::broadcast_channels(&get(a), oshape)
                }
                Op::SliceChannels { a, from, len } => {
                    let [n, c, h, w] = a.shape();
                    let plane = h * w;
                    let src = get(a);
                    let mut out = vec![0.0f64; n * len * plane];
                    for b in 0..n {
                        out[b * len * plane..][..len * plane]
                            .copy_from_slice(&src[(b * c + from) * plane..][..len * plane]);
                    }
                    out
                }
                Op::RepeatChannels { a, times } => {
                    let [n, c, h, w] = a.shape();
                    let plane = h * w;
                    let src = get(a);
                    let mut out = vec![0.0f64; n * c * times * plane];
                    for b in 0..n {
                        for t in 0..*times {
                            out[(b * times + t) * c * plane..][..c * plane]
                                .copy_from_slice(&src[b * c * plane..][..c * plane]);
                        }
                    }
                    out
                }
            };
            values[id] = Some(v);
        }
        values[output].take().expect("output node evaluated")
    }
}

/// Naive f64 twins of the forward kernels, used only by `replay_f64` on the
/// small tensors that gradient checks run on.
mod f64_ops {
    use super::Shape;
    use crate::tensor::kernels::{conv_out_dim, convt_out_dim};

    pub fn conv2d(
        input: &[f64],
        ishape: &Shape,
        weight: &[f64],
        wshape: &Shape,
        bias: &[f64],
        stride: usize,
        padding: usize,
    ) -> Vec<f64> {
        let [n, in_c, h, w] = *ishape;
        let [out_c, _, k, _] = *wshape;
        let oh = conv_out_dim(h, k, stride, padding);
        let ow = conv_out_dim(w, k, stride, padding);
        let mut out = vec![0.0f64; n * out_c * oh * ow];
        for b in 0..n {
            for oc in 0..out_c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[oc];
                        for ic in 0..in_c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        acc += input[((b * in_c + ic) * h + iy as usize) * w
                                            + ix as usize]
                                            * weight[((oc * in_c + ic) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((b * out_c + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_transposed(
        input: &[f64],
        ishape: &Shape,
        weight: &[f64],
        wshape: &Shape,
        bias: &[f64],
        stride: usize,
        padding: usize,
        oshape: &Shape,
    ) -> Vec<f64> {
        let [n, in_c, h, w] = *ishape;
        let [_, out_c, k, _] = *wshape;
        let [_, _, oh, ow] = *oshape;
        debug_assert_eq!(oh, convt_out_dim(h, k, stride, padding));
        let mut out = vec![0.0f64; n * out_c * oh * ow];
        for b in 0..n {
            for oc in 0..out_c {
                let plane = &mut out[(b * out_c + oc) * oh * ow..][..oh * ow];
                for v in plane.iter_mut() {
                    *v = bias[oc];
                }
            }
        }
        for b in 0..n {
            for ic in 0..in_c {
                for iy in 0..h {
                    for ix in 0..w {
                        let x = input[((b * in_c + ic) * h + iy) * w + ix];
                        for oc in 0..out_c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let oy = (iy * stride + ky) as isize - padding as isize;
                                    let oxx = (ix * stride + kx) as isize - padding as isize;
                                    if oy >= 0 && oy < oh as isize && oxx >= 0 && oxx < ow as isize
                                    {
                                        out[((b * out_c + oc) * oh + oy as usize) * ow
                                            + oxx as usize] +=
                                            x * weight[((ic * out_c + oc) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn mux_parity(a: &[f64], b: &[f64], shape: &Shape) -> Vec<f64> {
        let [n, c, h, w] = *shape;
        let mut out = vec![0.0f64; n * c * h * w];
        for img in 0..n * c {
            for y in 0..h {
                for x in 0..w {
                    let i = (img * h + y) * w + x;
                    out[i] = if (y + x) % 2 == 0 { a[i] } else { b[i] };
                }
            }
        }
        out
    }

    pub fn space_to_depth(input: &[f64], ishape: &Shape) -> Vec<f64> {
        let [n, c, h, w] = *ishape;
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0f64; n * c * h * w];
        for b in 0..n {
            for ci in 0..c {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let oc = ci * 4 + dy * 2 + dx;
                        for y in 0..oh {
                            for x in 0..ow {
                                out[((b * c * 4 + oc) * oh + y) * ow + x] =
                                    input[((b * c + ci) * h + 2 * y + dy) * w + 2 * x + dx];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn depth_to_space(input: &[f64], ishape: &Shape) -> Vec<f64> {
        let [n, c4, h, w] = *ishape;
        let c = c4 / 4;
        let mut out = vec![0.0f64; n * c4 * h * w];
        for b in 0..n {
            for ci in 0..c {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let ic = ci * 4 + dy * 2 + dx;
                        for y in 0..h {
                            for x in 0..w {
                                out[((b * c + ci) * h * 2 + 2 * y + dy) * w * 2 + 2 * x + dx] =
                                    input[((b * c4 + ic) * h + y) * w + x];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn concat_channels(a: &[f64], ashape: &Shape, b: &[f64], bshape: &Shape) -> Vec<f64> {
        let [n, ac, h, w] = *ashape;
        let bc = bshape[1];
        let plane = h * w;
        let mut out = vec![0.0f64; n * (ac + bc) * plane];
        for bi in 0..n {
            out[bi * (ac + bc) * plane..][..ac * plane]
                .copy_from_slice(&a[bi * ac * plane..][..ac * plane]);
            out[(bi * (ac + bc) + ac) * plane..][..bc * plane]
                .copy_from_slice(&b[bi * bc * plane..][..bc * plane]);
        }
        out
    }

    pub fn broadcast_channels(a: &[f64], oshape: &Shape) -> Vec<f64> {
        let [n, c, h, w] = *oshape;
        let mut out = vec![0.0f64; n * c * h * w];
        for b in 0..n {
            for ci in 0..c {
                for v in &mut out[(b * c + ci) * h * w..][..h * w] {
                    *v = a[ci];
                }
            }
        }
        out
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn softplus_f32(x: f32) -> f32 {
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid_f32(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn accum(grads: &mut [Option<Vec<f32>>], target: &Tensor, contrib: Vec<f32>) {
    let Some(id) = target.node() else { return };
    match &mut grads[id] {
        Some(g) => {
            for (dst, src) in g.iter_mut().zip(contrib.iter()) {
                *dst += *src;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}


impl Op {
    fn backward(&self, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match self {
            Op::Leaf { .. } => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                oshape,
            } => {
                if input.node().is_some() {
                    let din = kernels::conv2d_input_grad(
                        g,
                        oshape,
                        weight.data(),
                        &weight.shape(),
                        *stride,
                        *padding,
                        &input.shape(),
                    );
                    accum(grads, input, din);
                }
                if weight.node().is_some() {
                    let dw = kernels::conv2d_weight_grad(
                        g,
                        oshape,
                        input.data(),
                        &input.shape(),
                        &weight.shape(),
                        *stride,
                        *padding,
                    );
                    accum(grads, weight, dw);
                }
                if bias.node().is_some() {
                    accum(grads, bias, kernels::conv2d_bias_grad(g, oshape));
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                padding,
                oshape,
            } => {
                if input.node().is_some() {
                    let zero_bias = vec![0.0f32; weight.shape()[0]];
                    let (din, _) = kernels::conv2d(
                        g,
                        oshape,
                        weight.data(),
                        &weight.shape(),
                        &zero_bias,
                        *stride,
                        *padding,
                    );
                    accum(grads, input, din);
                }
                if weight.node().is_some() {
                    // dW[cf, ct, ky, kx] = sum_b,p x[b,cf,p] * g[b,ct,p*s+k-pad]
                    let dw = kernels::conv2d_weight_grad(
                        input.data(),
                        &input.shape(),
                        g,
                        oshape,
                        &weight.shape(),
                        *stride,
                        *padding,
                    );
                    accum(grads, weight, dw);
                }
                if bias.node().is_some() {
                    accum(grads, bias, kernels::conv2d_bias_grad(g, oshape));
                }
            }
            Op::LeakyRelu { input, slope } => {
                if input.node().is_some() {
                    let d = input
                        .data()
                        .iter()
                        .zip(g.iter())
                        .map(|(&x, &gv)| if x >= 0.0 { gv } else { *slope * gv })
                        .collect();
                    accum(grads, input, d);
                }
            }
            Op::Add { a, b } => {
                if a.node().is_some() {
                    accum(grads, a, g.to_vec());
                }
                if b.node().is_some() {
                    accum(grads, b, g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if a.node().is_some() {
                    accum(grads, a, g.to_vec());
                }
                if b.node().is_some() {
                    accum(grads, b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul { a, b } => {
                if a.node().is_some() {
                    let d = g
                        .iter()
                        .zip(b.data().iter())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    accum(grads, a, d);
                }
                if b.node().is_some() {
                    let d = g
                        .iter()
                        .zip(a.data().iter())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    accum(grads, b, d);
                }
            }
            Op::Div { a, b } => {
                if a.node().is_some() {
                    let d = g
                        .iter()
                        .zip(b.data().iter())
                        .map(|(&gv, &bv)| gv / bv)
                        .collect();
                    accum(grads, a, d);
                }
                if b.node().is_some() {
                    let d = g
                        .iter()
                        .zip(a.data().iter().zip(b.data().iter()))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect();
                    accum(grads, b, d);
                }
            }
            Op::AddScalar { a, .. } => {
                if a.node().is_some() {
                    accum(grads, a, g.to_vec());
                }
            }
            Op::MulScalar { a, c } => {
                if a.node().is_some() {
                    accum(grads, a, g.iter().map(|&v| v * c).collect());
                }
            }
            Op::Softplus { a } => {
                if a.node().is_some() {
                    let d = g
                        .iter()
                        .zip(a.data().iter())
                        .map(|(&gv, &x)| gv * sigmoid_f32(x))
                        .collect();
                    accum(grads, a, d);
                }
            }
            Op::Ln { a } => {
                if a.node().is_some() {
                    let d = g
                        .iter()
                        .zip(a.data().iter())
                        .map(|(&gv, &x)| gv / x)
                        .collect();
                    accum(grads, a, d);
                }
            }
            Op::ClampMin { a, min } => {
                if a.node().is_some() {
                    let d = g
                        .iter()
                        .zip(a.data().iter())
                        .map(|(&gv, &x)| if x >= *min { gv } else { 0.0 })
                        .collect();
                    accum(grads, a, d);
                }
            }
            Op::NormalCdf { a } => {
                if a.node().is_some() {
                    let d = g
                        .iter()
                        .zip(a.data().iter())
                        .map(|(&gv, &x)| gv * gauss::normal_pdf(x as f64) as f32)
                        .collect();
                    accum(grads, a, d);
                }
            }
            Op::Sum { a } => {
                if a.node().is_some() {
                    accum(grads, a, vec![g[0]; a.numel()]);
                }
            }
            Op::MuxParity { a, b } => {
                let shape = a.shape();
                let zero = vec![0.0f32; a.numel()];
                if a.node().is_some() {
                    accum(grads, a, kernels::mux_parity(g, &zero, &shape));
                }
                if b.node().is_some() {
                    accum(grads, b, kernels::mux_parity(&zero, g, &shape));
                }
            }
            Op::SpaceToDepth { a } => {
                if a.node().is_some() {
                    let gshape = {
                        let [n, c, h, w] = a.shape();
                        [n, c * 4, h / 2, w / 2]
                    };
                    accum(grads, a, kernels::depth_to_space(g, &gshape).0);
                }
            }
            Op::DepthToSpace { a } => {
                if a.node().is_some() {
                    let gshape = {
                        let [n, c, h, w] = a.shape();
                        [n, c / 4, h * 2, w * 2]
                    };
                    accum(grads, a, kernels::space_to_depth(g, &gshape).0);
                }
            }
            Op::ConcatChannels { a, b } => {
                let [n, ac, h, w] = a.shape();
                let bc = b.shape()[1];
                let plane = h * w;
                if a.node().is_some() {
                    let mut da = vec![0.0f32; a.numel()];
                    for bi in 0..n {
                        da[bi * ac * plane..][..ac * plane].copy_from_slice(
                            &g[bi * (ac + bc) * plane..][..ac * plane],
                        );
                    }
                    accum(grads, a, da);
                }
                if b.node().is_some() {
                    let mut db = vec![0.0f32; b.numel()];
                    for bi in 0..n {
                        db[bi * bc * plane..][..bc * plane].copy_from_slice(
                            &g[(bi * (ac + bc) + ac) * plane..][..bc * plane],
                        );
                    }
                    accum(grads, b, db);
                }
            }
            Op::BroadcastChannels { a, oshape } => {
                if a.node().is_some() {
                    let [n, c, h, w] = *oshape;
                    let mut da = vec![0.0f32; c];
                    for (ci, slot) in da.iter_mut().enumerate() {
                        let mut acc = 0.0f64;
                        for b in 0..n {
                            for &gv in &g[(b * c + ci) * h * w..][..h * w] {
                                acc += gv as f64;
                            }
                        }
                        *slot = acc as f32;
                    }
                    accum(grads, a, da);
                }
            }
            Op::SliceChannels { a, from, len } => {
                if a.node().is_some() {
                    let [n, c, h, w] = a.shape();
                    let plane = h * w;
                    let mut da = vec![0.0f32; a.numel()];
                    for b in 0..n {
                        da[(b * c + from) * plane..][..len * plane]
                            .copy_from_slice(&g[b * len * plane..][..len * plane]);
                    }
                    accum(grads, a, da);
                }
            }
            Op::RepeatChannels { a, times } => {
                if a.node().is_some() {
                    let [n, c, h, w] = a.shape();
                    let plane = h * w;
                    let mut da = vec![0.0f32; a.numel()];
                    for b in 0..n {
                        for t in 0..*times {
                            let src = &g[(b * times + t) * c * plane..][..c * plane];
                            let dst = &mut da[b * c * plane..][..c * plane];
                            for (d, s) in dst.iter_mut().zip(src.iter()) {
                                *d += *s;
                            }
                        }
                    }
                    accum(grads, a, da);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec([1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let loss = tape.sum(&x);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[1., 1., 1., 1., 1., 1.]);
    }

    #[test]
    fn square_sum_gradient() {
        // loss = sum(x .* x), x = [1, 2]  =>  grad [2, 4]
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec([1, 1, 1, 2], vec![1., 2.]).unwrap());
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[2., 4.]);
    }

    #[test]
    fn leaky_relu_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec([1, 1, 1, 3], vec![-1., 0., 2.]).unwrap());
        let y = tape.leaky_relu(&x, 0.1).unwrap();
        assert_eq!(y.data(), &[-0.1, 0.0, 2.0]);
        let loss = tape.sum(&y);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap()[0], 0.1);

        // slope 0 reduces to ReLU
        let mut tape = Tape::no_grad();
        let x = Tensor::from_vec([1, 1, 1, 2], vec![-3., 3.]).unwrap();
        let y = tape.leaky_relu(&x, 0.0).unwrap();
        assert_eq!(y.data(), &[0.0, 3.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros([1, 1, 2, 2]));
        let y = tape.add_scalar(&x, 1.0);
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn disconnected_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::zeros([1, 1, 1, 2]));
        let y = tape.leaf(&Tensor::zeros([1, 1, 1, 2]));
        let loss = tape.sum(&x);
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.get(&x).is_some());
        assert!(grads.get(&y).is_none());
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(&Tensor::zeros([1, 1, 2, 2]));
        let y = tape.add_scalar(&x, 1.0);
        assert!(x.node().is_none() && y.node().is_none());
        assert!(tape.is_empty());
    }

    #[test]
    fn transposed_conv_single_tap_broadcast() {
        // 1x1x1x1 input of 1 through a 3x3 all-ones kernel, stride 2, pad 0
        let mut tape = Tape::no_grad();
        let x = Tensor::from_vec([1, 1, 1, 1], vec![1.0]).unwrap();
        let w = Tensor::from_vec([1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let b = Tensor::zeros([1, 1, 1, 1]);
        let y = tape.conv2d_transposed(&x, &w, &b, 2, 0).unwrap();
        assert_eq!(y.shape(), [1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn transposed_conv_size_formula() {
        // stride 2 on 1x1x2x2 -> 5x5 with k=3, pad 0
        let mut tape = Tape::no_grad();
        let x = Tensor::zeros([1, 1, 2, 2]);
        let w = Tensor::zeros([1, 1, 3, 3]);
        let b = Tensor::zeros([1, 1, 1, 1]);
        let y = tape.conv2d_transposed(&x, &w, &b, 2, 0).unwrap();
        assert_eq!(y.shape(), [1, 1, 5, 5]);
    }

    #[test]
    fn conv_linearity() {
        use crate::rng::SplitMix64;
        let mut rng = SplitMix64::new(17);
        let mk = |rng: &mut SplitMix64, n: usize| -> Vec<f32> {
            (0..n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect()
        };
        let mut tape = Tape::no_grad();
        let x = Tensor::from_vec([1, 2, 6, 6], mk(&mut rng, 72)).unwrap();
        let y = Tensor::from_vec([1, 2, 6, 6], mk(&mut rng, 72)).unwrap();
        let w = Tensor::from_vec([3, 2, 3, 3], mk(&mut rng, 54)).unwrap();
        let b = Tensor::zeros([1, 3, 1, 1]);
        let (alpha, beta) = (0.7f32, -1.3f32);
        let ax = tape.mul_scalar(&x, alpha);
        let by = tape.mul_scalar(&y, beta);
        let mix = tape.add(&ax, &by).unwrap();
        let lhs = tape.conv2d(&mix, &w, &b, 1, 1).unwrap();
        let cx = tape.conv2d(&x, &w, &b, 1, 1).unwrap();
        let cy = tape.conv2d(&y, &w, &b, 1, 1).unwrap();
        let acx = tape.mul_scalar(&cx, alpha);
        let bcy = tape.mul_scalar(&cy, beta);
        let rhs = tape.add(&acx, &bcy).unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data().iter()) {
            assert!((l - r).abs() <= 1e-5 * r.abs().max(1.0));
        }
    }

    #[test]
    fn concat_and_broadcast_roundtrip_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::full([2, 2, 2, 2], 1.0));
        let b = tape.leaf(&Tensor::full([2, 3, 2, 2], 2.0));
        let cat = tape.concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), [2, 5, 2, 2]);
        let loss = tape.sum(&cat);
        let grads = tape.backward(&loss).unwrap();
        assert!(grads.get(&a).unwrap().iter().all(|&v| v == 1.0));
        assert!(grads.get(&b).unwrap().iter().all(|&v| v == 1.0));

        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::from_vec([1, 3, 1, 1], vec![1., 2., 3.]).unwrap());
        let bc = tape.broadcast_channels(&p, [2, 3, 4, 4]).unwrap();
        assert_eq!(bc.at(1, 2, 3, 3), 3.0);
        let loss = tape.sum(&bc);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&p).unwrap(), &[32.0, 32.0, 32.0]);
    }
}

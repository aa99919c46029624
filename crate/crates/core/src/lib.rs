//! Learned image compression with a parallelizable checkerboard spatial
//! context model.
//!
//! The crate bundles everything needed to train and run a small hyperprior
//! codec on the CPU:
//!
//! * [`tensor`] — a minimal dense-tensor engine with tape-based reverse-mode
//!   autodiff, just enough for the codec networks and the training loop.
//! * [`checkerboard`] — anchor/non-anchor spatial partitioning, context-mask
//!   construction, and the MUX / DEMUX / space-to-depth plumbing used by the
//!   one-pass encoder and two-pass decoder.
//! * [`entropy`] — discretized Gaussian (and Gaussian-mixture) likelihoods,
//!   parameter quantization, and integer CDF tables.
//! * [`coder`] — a byte-oriented range coder operating on those CDF tables.
//! * [`codec`] — the full pipeline: analysis/synthesis transforms, hyper
//!   transforms, context model, parameter network, bitstream container.
//! * [`trainer`] — rate-distortion training with Adam and gradient checking.
//! * [`masklab`] — the random-mask supernet used to score arbitrary context
//!   patterns by their rate saving ratio.
//! * [`bench`] — decode timing instrumentation (per-phase latency, pass
//!   counts, throughput).

pub mod bench;
pub mod checkerboard;
pub mod codec;
pub mod coder;
pub mod data;
pub mod entropy;
pub mod gauss;
pub mod masklab;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod trainer;

//! Post-training vector quantization of diffusion-transformer blocks.
//!
//! Weights are split into row sub-vectors, clustered into per-layer codebooks,
//! and given a short list of candidate codewords per sub-vector. A zero-data,
//! block-wise calibration then tunes codebooks and candidate mixing ratios
//! against the floating-point model's own sampling trajectories, and finally
//! commits each sub-vector to its highest-ratio candidate.
//!
//! * [`tensor`]: dense tensors and a reverse-mode tape.
//! * [`vq`]: codebooks, k-means, candidate sets, packing, storage accounting.
//! * [`dit`]: the toy diffusion transformer and its DDPM sampler.
//! * [`calib`]: the calibration engine and its diagnostics.
//! * [`modelio`]: tensor-container and quantized-model files.
//! * [`kernel`]: fused lookup matmul over packed assignments.

pub mod calib;
pub mod dit;
pub mod error;
pub mod kernel;
pub mod modelio;
pub mod tensor;
pub mod vq;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

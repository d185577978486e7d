//! Structured ternary pattern networks: static {-1, 0, +1} convolution
//! kernels drawn from center-symmetric local binary patterns and Haar-like
//! rectangle features, a multiplier-free convolution engine over bit-packed
//! weights, and a small training stack where those kernels stay frozen.
//!
//! Float math is generic over [`Scalar`] (f32/f64); the aliases below fix
//! the f32 instantiation used by the CLI and the file formats.

pub mod bank_io;
pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod packed;
pub mod pattern;
pub mod pgm;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use conv::{
    bank_to_weights, conv2d_input_grad, conv2d_input_grad_counted, conv2d_reference,
    conv2d_reference_counted, conv2d_ternary, conv2d_ternary_counted, ConvGeometry, OpCount,
};
pub use error::{Result, StepError};
pub use packed::PackedTernary;
pub use pattern::{
    gen_cslbp_kernel, gen_haar_kernel, gen_random_binary_kernel, mirror_index, BankShape,
    CsLbpParams, FilterBank, GenRecord, HaarParams, HaarRect, KernelFamily, TernaryKernel,
};
pub use rng::PatternRng;
pub use scalar::{round_ties_even, Scalar};
pub use tensor::{Shape4, Tensor4};

/// Cap the worker pool used for batch-parallel sections. Must be called
/// before the first parallel operation; later calls have no effect.
pub fn set_worker_threads(n: usize) {
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
}

/// f32 tensor, the precision used on disk and in the CLI.
pub type Tensor4f = Tensor4<f32>;
/// f64 tensor, used by the finite-difference gradient harness.
pub type Tensor4d = Tensor4<f64>;
/// f32 model graph.
pub type ModelF = nn::ModelGraph<f32>;

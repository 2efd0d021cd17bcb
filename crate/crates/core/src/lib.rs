//! Binarized neural network inference on bit-packed ±1 operands.
//!
//! Convolutions are lowered with im2col; the binary path packs weights once
//! along rows and lowered inputs along columns into 32-bit words, then
//! replaces the float multiply-accumulate with XNOR and population count. A
//! deliberately plain float-32 GEMM following the same forward graph serves as
//! the control group, and a direct convolution serves as the reference oracle.

pub mod bench;
pub mod binarize;
pub mod error;
pub mod kernels;
pub mod lowering;
pub mod network;
pub mod tensor;

pub use bench::{run_benchmark, run_verify, BenchConfig, BenchReport, VerifySummary};
pub use error::{Error, Result};
pub use kernels::IntMatrix;
pub use network::{build_default_network, KernelChoice, LayerSpec, Network, NetworkSpec};
pub use tensor::{ConvGeometry, FloatMatrix, FloatTensor, Orientation, PackedBitMatrix};

//! Dense tensor substrate, deterministic kernels and the bundle file format.

pub mod bundle;
pub mod kernels;
pub mod rng;
pub mod tensor;

pub use bundle::{AnyTensor, Bundle};
pub use kernels::{gelu, l2_normalize, layernorm, matmul, softmax};
pub use rng::{derive_seed, seeded, Rng};
pub use tensor::{DType, Scalar, Tensor};

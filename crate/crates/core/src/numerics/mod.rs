//! Dense `f64` tensors, the neural primitives built on them, and reverse-mode
//! differentiation.

pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use ops::{
    bilinear_resize, conv2d, gelu, global_avg_pool, layer_norm, matmul, matmul_nt, minmax_normalize,
    normalize_axis, relu, softmax,
};
pub use tape::{backward, GradTape, Var};
pub use tensor::Tensor;

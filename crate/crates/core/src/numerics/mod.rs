//! Dense `f64` matrix kernel with hand-written backward passes.

mod gradcheck;
mod ops;
mod tensor;

pub use gradcheck::grad_check;
pub use ops::{
    gemm, layer_norm, layer_norm_backward, matmul, matmul_backward, matmul_nt, matmul_tn,
    softmax_in_place, softmax_rows, softmax_rows_backward, tanh, tanh_backward, LayerNormCache,
    Trans, LAYER_NORM_EPS,
};
pub(crate) use ops::{gemm_strided, Strided};
pub use tensor::Tensor;

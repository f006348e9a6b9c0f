//! Dense kernels, a reverse-mode tape and gradient checking.

mod dct;
mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use dct::{dct, idct};
pub use gradcheck::{grad_check, FD_STEP};
pub use ops::{
    attention, cross_entropy, gelu, gelu_grad, log_softmax, multi_head_attention, multi_head_attention_backward,
    rms_norm, rms_norm_backward, rope, AttnMask, RMS_EPS,
};
pub use tape::{AttnStats, Grads, ParamId, Tape, Var};
pub use tensor::Tensor2;

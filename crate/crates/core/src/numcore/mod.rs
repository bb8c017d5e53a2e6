//! Minimal dense-tensor engine: a recording tape for reverse-mode
//! differentiation, the layers and losses the methods need, SGD and a
//! truncated SVD.

mod init;
mod optim;
mod svd;
mod tape;
mod tensor;

pub use init::{kaiming_uniform, seeded_rng};
pub use optim::{sgd_step, SgdConfig, SgdState};
pub use svd::{truncated_svd, TruncatedSvd};
pub(crate) use tape::conv_out_len;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Numerically stable softmax of one row, accumulated in `f64`.
pub fn softmax_row(z: &[f32]) -> Vec<f32> {
    let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = z.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / s) as f32).collect()
}

//! Minimal differentiable-kernel substrate.
//!
//! Dense f64 tensors, a reverse-mode tape over a fixed set of chunky
//! operations, parameter storage with deterministic initialization, Adam,
//! and a checksummed weight-file format. Every learned block in the engine
//! is built from these pieces; nothing here knows about cameras or depth.
//!
//! Forward passes are pure functions of `(inputs, ParameterStore)` and may
//! run concurrently; training (gradient accumulation, [`adam_step`]) is
//! single-writer.

mod adam;
mod gradcheck;
mod kernels;
mod nets;
mod store;
mod tape;
mod tensor;
mod weights;

pub use adam::{adam_step, AdamParams, AdamState};
pub use gradcheck::finite_diff_max_rel_err;
pub use kernels::{conv_out_extent, PadMode};
pub use nets::{Conv1dNet, Conv2dNet, MlpNet};
pub use store::ParameterStore;
pub use tape::{GradMap, SparseConvPlan, Tape, Var};
pub use tensor::Tensor;
pub use weights::{load_weights, save_weights, WEIGHT_FORMAT_VERSION};

/// Group-normalization group count: 8 when the channel count allows it,
/// otherwise 1.
pub fn group_count(channels: usize) -> usize {
    if channels >= 8 && channels % 8 == 0 {
        8
    } else {
        1
    }
}

/// Row-wise softmax without a tape.
pub fn softmax_rows_pure(x: &[f64], n: usize, k: usize, out: &mut [f64]) {
    kernels::softmax_fwd(x, n, k, out);
}

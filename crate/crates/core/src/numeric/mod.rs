//! Dense primitives, perceptrons, normalization and the optimizer shared by every
//! other module. Everything is `f64`.

mod matrix;
mod mlp;
mod normalize;
mod optim;

pub use matrix::{axpy, column_rank, dot, norm, Matrix};
pub use mlp::{
    Activation, ForwardCache, MlpGrads, MlpParams, NormMode, NormState, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM,
    LEAKY_RELU_SLOPE,
};
pub use normalize::{
    l2_normalize, l2_normalize_backward, normalize_rows, normalize_rows_backward, EmbeddingVector, MIN_NORM,
};
pub use optim::{sgd_step, OptimizerState};

//! Dense numerical kernel: convolution, resampling, loss, optimizer and backprop.

mod conv;
mod gemm;
mod gradcheck;
mod hypercolumn;
mod loss;
mod optim;
mod resize;
mod tape;

pub use conv::{conv2d, LayerParams};
pub use gradcheck::{
    gradcheck, relative_error, ArrayError, Differentiable, GradCheckReport, ScaledGradient, GRADCHECK_STEP,
    GRADCHECK_TOLERANCE,
};
pub use loss::{sigmoid, weighted_bce, weighted_bce_with_logits, BCE_EPSILON};
pub use optim::{sgd_step, OptimizerState};
pub use resize::{bilinear_resize, bilinear_resize_transpose, resize_plane};
pub use tape::{Gradients, LayerGrads, NodeId, Tape};

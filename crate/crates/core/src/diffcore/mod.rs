//! Tensor arithmetic, layer primitives and reverse-mode gradients.

mod gradcheck;
mod graph;
mod layers;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_check, FdReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{
    activation, batchnorm, dense, log_softmax, softmax_rows, Activation, BatchNormState,
    BnMode, BnOutput, BN_EPSILON, BN_MOMENTUM,
};
pub use rng::{RngState, Stream};
pub use tensor::Tensor;


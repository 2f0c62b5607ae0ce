//! Dense tensors, reverse-mode autodiff, layers and optimizers.

mod array;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod layers;
mod optim;
mod params;

pub use array::Tensor;
pub use gradcheck::{finite_diff_grad, finite_diff_tensor, max_relative_error};
pub use graph::{softmax_last, BatchStats, BnMode, Graph, Var, NORM_EPS};
pub use optim::{adam_step, sgd_step, Hyper, OptimizerState};
pub use params::{
    apply_bn_updates, count_params, Ctx, Mode, Param, ParamSet, PassOutcome, BN_MOMENTUM,
};

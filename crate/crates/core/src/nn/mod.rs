//! Dense numerical kernel: matrices, parameters, activations, optimizer,
//! checkpoints and a finite-difference gradient checker.

pub mod checkpoint;
pub mod dense;
pub mod gradcheck;
pub mod matrix;
pub mod ops;
pub mod optim;
pub mod params;

pub use checkpoint::Checkpoint;
pub use dense::{dense_apply, init_weight, Activation, Dense};
pub use gradcheck::{check_gradients, relative_error, GradCheckReport};
pub use matrix::Matrix;
pub use ops::{affine, affine_backward, linear_forward, sigmoid, softmax, softmax_backward, softplus, softplus_grad};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{ParamId, ParamStore};

//! Numerical core of the unit-gradient optimizer lab.
//!
//! * [`tensor`]: ragged parameter tensors and the dual-norm
//! * [`model`]: a small MLP with analytic gradients
//! * [`data`]: MNIST IDX loading
//! * [`optimizer`]: SGD, Adagrad, NGD-FM/CW, UGD, PUGD, SAM, ASAM
//! * [`schedule`]: constant and cosine learning rates
//! * [`landscape`]: plane slices, grids and trajectory projection

pub mod data;
pub mod error;
pub mod landscape;
pub mod model;
pub mod optimizer;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Activation, Batch, LossKind, Mlp};
pub use optimizer::{
    check_bounded_difference, BatchObjective, GradientOracle, Optimizer, OptimizerConfig, OptimizerKind,
    OptimizerState, StepFlags, StepRecord,
};
pub use schedule::{Schedule, ScheduleKind};
pub use tensor::{Component, RaggedTensor};

//! Minimal dense-network numerics: layers, forward/backward passes,
//! optimizers and finite-difference gradient checks.

pub mod gradcheck;
pub mod layer;
pub mod matrix;
pub mod net;
pub mod optim;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use layer::{Activation, DenseLayer};
pub use matrix::Matrix;
pub use net::{DenseNet, GradientSet, LayerGrad};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};

//! Small reverse-mode differentiation engine over `f64` matrices, with the
//! optimizers and checkpoint format used by the training stages.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Axis, Gradients, Graph, Var};
pub use nn::{Activation, Mlp};
pub use optim::{Adam, AdamConfig, OneCycle};
pub use params::{Bound, ParamSet};
pub use tensor::Tensor;

//! Dense tensors, reverse-mode differentiation and the two optimizers.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{CustomOp, Grads, Graph, Mode, Var};
pub use optim::{adamw_step, sgd_step, OptimKind, OptimState};
pub use params::ParamStore;
pub use tensor::{logsumexp, Real, Tensor};

pub(crate) use tensor::logsumexp_unchecked;

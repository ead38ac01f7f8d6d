//! Dense matrices, a reverse-mode tape and a finite-difference gradient oracle.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheck, REL_FLOOR};
pub use graph::{masked_softmax, sigmoid, Graph, Var};
pub use params::{Grads, ParamStore};
pub use tensor::{Real, Tensor};

/// Floor applied to every log argument.
pub const LOG_FLOOR: f64 = 1e-12;

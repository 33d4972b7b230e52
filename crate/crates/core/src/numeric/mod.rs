//! Tensor substrate: dense arrays, parameters, a recording graph with reverse-mode
//! gradients, the layers built on it, and finite-difference checking.

pub(crate) mod element;
pub mod gradcheck;
pub(crate) mod graph;
pub mod nn;
mod ops;
pub(crate) mod param;
mod tensor;

pub use element::Element;
pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};
pub use param::{param_seed, Init, ParamId, ParamPlan, ParamSink, ParamStore, Parameter, PlannedParam};
pub use tensor::Tensor;

pub(crate) use ops::sigmoid_scalar;

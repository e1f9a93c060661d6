//! Minimal reverse-mode differentiation over `f64` matrices.

mod gradcheck;
mod graph;
mod params;

pub use gradcheck::{check_gradients, relative_error, GradCheckReport};
pub use graph::{sigmoid, softmax_rows, Gradients, Graph, Var};
pub use params::{Mat, ParamId, ParamStore};

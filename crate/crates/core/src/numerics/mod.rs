//! Dense values, reverse-mode gradients, the Adam optimizer and a
//! finite-difference gradient checker.

mod adam;
mod checkpoint;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::AdamState;
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use gradcheck::{finite_diff_check, GradCheckReport, MAX_COORDS_PER_TENSOR};
pub use graph::{logsumexp, sigmoid, softmax, CustomOp, Graph, RowGroups, Var};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

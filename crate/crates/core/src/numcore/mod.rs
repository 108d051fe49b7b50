//! Dense tensors and a tape-style reverse-mode differentiation graph.
//!
//! Every learnable computation in the crate is expressed through [`Graph`]:
//! leaves are created with [`Graph::param`] (tracked) or [`Graph::constant`],
//! operations return new [`Var`] handles, and [`Graph::backward`] fills in
//! gradients for every tracked node.

mod gradcheck;
mod graph;
mod scalar;
mod tensor;

pub use gradcheck::{check_gradients, finite_difference_check, GradCheckOptions, GradCheckReport};
pub use graph::{DropoutRng, Graph, Var};
pub use scalar::Scalar;
pub use tensor::{Tensor, MAX_RANK};


//! Still-to-video face recognition at desk scale.

pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod nn;
pub mod suite;
mod kernels;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{ElemKind, Graph, NormMode, Var};
pub use kernels::ConvGeom;
pub use tensor::Tensor;

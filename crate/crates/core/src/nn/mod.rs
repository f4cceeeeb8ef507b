//! A small reverse-mode automatic differentiation engine over `ndarray`.
//!
//! [`Graph`] records eagerly evaluated tensor operations, [`ParamStore`] owns a
//! network's weights, and [`Adam`] updates them. Weight tying goes through
//! [`ExpandMap`], a sparse linear map from free parameters to full kernels.

pub mod expand;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod param;

pub use expand::ExpandMap;
pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{Gradients, Graph, Var};
pub use optim::Adam;
pub use param::{polyak_update, Param, ParamStore};

//! Dense `f64` tensors, a tape-based reverse-mode autodiff [`Graph`], and a
//! finite-difference [`grad_check`].
//!
//! ```
//! use carpe_numerics::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.input(&Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
//! ```

mod attention;
mod error;
mod gemm;
mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use attention::AttnMask;
pub use error::{NumericsError, Result};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradReport, ParamCheck};
pub use graph::{CustomBackward, Graph, Var};
pub use ops::softmax_slice;
pub use tensor::Tensor;

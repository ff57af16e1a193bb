//! Dense tensor arithmetic with a define-by-run reverse-mode tape.
//!
//! The primitive set covers convolutional classifiers (plain, depthwise,
//! dilated and strided convolution, pooling, batch normalization), small
//! generators (nearest upsampling, `tanh`) and the cross-entropy / logistic
//! losses used for adversarial training. [`hvp`] provides finite-difference
//! Hessian-vector and mixed second-derivative products on top of any
//! gradient routine.

pub mod check;
mod error;
mod graph;
mod hvp;
mod kernels;
mod map;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{Bound, Conv2dOpts, Graph, Padding, Var};
pub use hvp::{hvp, DEFAULT_HVP_EPS, MIN_DIRECTION_NORM};
pub use map::{GradientMap, TensorMap, WeightSet};
pub use tensor::Tensor;

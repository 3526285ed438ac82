//! Dense tensors, reverse-mode differentiation and gradient checking.

pub mod gradcheck;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{check_gradients, relative_error, DiffMethod, GradCheckOptions, GradCheckReport, ParamCheck};
pub use ops::{gelu, layer_norm, normal_cdf, softmax, LAYER_NORM_EPS};
pub use params::{Gradients, Param, ParamId, ParamStore};
pub use tape::{Arith, Tape, Var};
pub use tensor::Tensor;

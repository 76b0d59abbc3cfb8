//! Dense tensors and the reverse-mode engine the model and losses run on.

mod kernels;
mod params;
mod tape;
mod tensor;

pub use params::{ParamId, ParamSet};
pub use tape::{Bound, Gradients, Tape, Var, KL_EPS};
pub use tensor::{Mask, Tensor};

//! Minimal reverse-mode differentiable tensor engine.

mod conv;
mod gradcheck;
mod tape;
mod tensor;

pub use conv::ConvGeom;
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport, Offender};
pub use tape::{
    gelu, sigmoid, softplus, BinaryKind, Bound, Elementwise, Gradients, OpTiming, Profile, Tape,
    UnaryKind, Var,
};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};

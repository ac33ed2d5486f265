//! Small reverse-mode differentiation core: dense matrices, a recording tape,
//! Adam, and a central-difference gradient checker.

pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod params;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::{CsrMatrix, Matrix};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamLeaf, ParamStore};
pub use tape::{Tape, Var, NORM_EPS};

//! Differentiable computation kernel: tape, layers, Gaussians and gradient checks.

mod gaussian;
mod gradcheck;
mod matrix;
mod nn;
mod params;
mod tape;

pub use gaussian::{
    argmax, gaussian_kl, reparam_sample, softmax_logits, Gaussian, GaussianVar, LOG_VAR_MAX, LOG_VAR_MIN,
};
pub use gradcheck::{grad_check, report as gradcheck_report, GradCheckReport, GRADCHECK_TOLERANCE};
pub use matrix::Matrix;
pub use nn::{dense_forward, gru_step, Activation};
pub use params::{glorot, Adam, ParamSet, Value};
pub(crate) use tape::sigmoid;
pub use tape::{Tape, Var};

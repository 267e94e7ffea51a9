//! Model syntax, intermediate representation, and implied covariance algebra.

mod implied;
mod ir;
mod parse;

pub use implied::{implied_covariance, ImpliedCovariance, ParamAssignment, ReducedForm};
pub use ir::{
    covariance_label, Covariance, Intercept, Loading, ModelIR, ParamKind, ParamValue, Regression,
};
pub use parse::parse_model;

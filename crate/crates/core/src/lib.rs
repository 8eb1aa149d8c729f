//! Data selection by optimal control of training dynamics.
//!
//! Quality scores over a small proxy set are solved from the co-state
//! conditions of an unrolled training run ([`pmp`]), transferred to a large
//! corpus by a regression scorer ([`scorer`]), and used to pick a training
//! subset with Gumbel-Top-K ([`select`]). [`scaling`] fits loss surfaces and
//! estimates compute, [`pipeline`] wires the stages together.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod error;
pub mod linalg;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod pmp;
pub mod scaling;
pub mod scorer;
pub mod select;

pub use error::{Error, Result};
pub use linalg::ParamVector;

//! Policy iteration (PI) and its regularized, recursively feasible variant PI⁺
//! for deterministic discrete-time optimal control on gridded state and input
//! spaces, together with the explicit stability and near-optimality bounds
//! they admit and a verification harness that checks them against
//! brute-force oracles.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod funcs;
pub mod model;
pub mod oracle;
pub mod pi;
pub mod piplus;
pub mod verify;

mod dp;

pub use funcs::{FuncError, KLBound, MonotoneFn};
pub use model::{Certificate, Grid, GridModel, PolicyTable, SystemModel, ValueTable};

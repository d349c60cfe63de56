//! Second-order cumulant expansion: site means plus connected two-site
//! blocks, with three-site moments closed by dropping the third cumulant.
//!
//! Same-site products are contracted exactly because every quantity is kept
//! as a density-matrix block rather than a list of operator moments.

mod finite;
mod kernel;
mod td;

pub use finite::{evolve_finite_observed, CumulantStateFinite, FiniteSolver};
pub use kernel::{
    closure_triple, g_first, g_second, hermiticity_error, kron, partial_trace_error, swap, third_order_closure, Block,
    PairInputs, PairKernel, ZERO_BLOCK,
};
pub use td::{evolve_td_observed, Convolution, CumulantStateTD, TdLayout, TdSolver, TdStorage};

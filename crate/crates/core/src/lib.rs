// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Dense numerical kernels index several parallel arrays per loop.
#![allow(clippy::needless_range_loop)]

pub mod admm;
pub mod harness;
pub mod kernel;
pub mod layout;
pub mod lyapunov;
pub mod model;
pub mod offline;
pub mod scenario;
pub mod traces;

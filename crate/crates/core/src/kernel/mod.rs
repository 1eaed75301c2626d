//! Solvers shared by the controllers.

pub mod balance;
pub mod lp;
pub mod projection;

pub use balance::{solve_balance_subproblem, BalanceError, BalanceSolution, Coord};
pub use lp::{solve_lp, solve_lp_sparse, LinearProgram, LpError, LpSolution, LpStatus};
pub use projection::project_pairwise_antisymmetric;

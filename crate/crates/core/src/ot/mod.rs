//! Entropic optimal transport between two pixel sets.
//!
//! The solver minimizes `<C, P> + eps * sum_ij P_ij ln P_ij`, i.e. the
//! transport cost plus `eps` times the negative Shannon entropy of the plan.
//! Written with the entropy `H(P) = -sum P ln P`, that is `<C, P> - eps * H(P)`:
//! the regularizer rewards spread-out plans, which is what makes the problem
//! strictly convex and solvable by Sinkhorn scaling.

mod cost;
mod exact;
mod sinkhorn;

pub use cost::{compute_cost_matrix, CostMatrix};
pub use exact::{exact_ot_oracle, EXACT_MAX_CELLS};
pub use sinkhorn::{
    sinkhorn, transport_cost, uniform_marginal, CouplingMatrix, SinkhornConfig, SinkhornSolution,
};

//! Numerical laboratory for the λ-lemma near normally hyperbolic invariant
//! manifolds and for transition-chain orbits of Arnold's Hamiltonian.

pub mod arnold_model;
pub mod chart;
pub mod cli;
pub mod diffusion;
pub mod graph_lab;
pub mod jet;
pub mod melnikov;
pub mod nhim;
pub mod numerics;
pub mod pendulum_oracle;

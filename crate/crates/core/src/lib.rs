//! Termination-guided resource-bound analysis for integer transition
//! systems: lexicographic phase-level termination proofs, transformation to
//! linearly-bounded hierarchically loop-nested form, cost relation system
//! generation with ranking-function embedding, and a polynomial bound
//! solver, with a seeded concrete interpreter as soundness oracle.

pub mod crs;
pub mod graph;
pub mod interp;
pub mod its;
pub mod linear;
pub mod pipeline;
pub mod size_rel;
pub mod solver;
pub mod termination;
pub mod transform;

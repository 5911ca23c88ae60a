//! einspace: a parameterised probabilistic grammar over neural architectures.

pub mod grammar;
pub mod interp;
pub mod mutation;
pub mod parallel;
pub mod rng;
pub mod sampling;
pub mod search;
pub mod seeds;
pub mod shape;
pub mod stats;
pub mod terminal;
pub mod tree;

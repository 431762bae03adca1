//! Fair policy learning when the scored population responds strategically.

pub mod analytics;
pub mod constraints;
pub mod experiment;
pub mod impossibility;
pub mod manifolds;
pub mod math;
pub mod model;
pub mod response;
pub mod solver;

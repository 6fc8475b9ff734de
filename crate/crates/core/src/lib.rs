//! Toy-scale context-aware logit ensembling between a vision-integrated stream
//! and a language stream, with top-1 routing over vision experts.

pub mod check;
pub mod config;
pub mod corpus;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod integrator;
pub mod language;
pub mod model;
pub mod nn;
pub mod params;
pub mod train;
pub mod vision;

pub use error::{CarpeError, Result};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

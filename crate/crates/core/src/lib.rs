//! Datasets, models, attacks, training regimes and generalization-bound
//! tooling built on the `aetlab-autodiff` tape.

pub mod attacks;
pub mod datasets;
pub mod models;
pub mod regimes;
pub mod theory;

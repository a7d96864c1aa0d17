//! Federated simulation: capacity schemes, the round loop, baselines, a dense
//! FedAvg reference, and the quadratic convergence bench.

mod config;
pub mod quadratic;
pub mod reference;
mod scheme;
mod sim;

pub use config::{Consistency, LocalUnit, Mode, RunConfig};
pub use quadratic::{quadratic_bench, ConvergenceReport, QuadraticParams, QuadraticProblem};
pub use reference::DenseFedAvg;
pub use scheme::CapacityScheme;
pub use sim::{
    aggregate, aggregation_weights, initial_theta, initial_user_vec, local_rng, local_schedule,
    run_training, sample_devices, ClientUpdate, RoundStats, ServerState, Simulator,
};

//! Federated averaging in random hashed subspaces.
//!
//! Devices with different memory budgets each train a projection of one
//! server parameter vector. Projections are count-min-sketch style binary
//! matrices defined by a single universal hash, folded so that every device's
//! subspace nests inside every larger one.

pub mod data;
pub mod error;
pub mod eval;
pub mod fedsim;
pub mod hashing;
pub mod model;
pub mod seed;
pub mod subspace;
pub mod verify;

pub use error::{FairError, Result};

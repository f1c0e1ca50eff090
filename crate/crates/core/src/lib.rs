//! Deterministic desk-scale federated-learning simulator with a minibatch
//! CKA representation-similarity analyzer.

pub mod cka;
pub mod data;
pub mod error;
pub mod exact;
pub mod experiment;
pub mod fl;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};

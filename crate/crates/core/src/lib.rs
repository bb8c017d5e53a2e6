//! Simulation engine and benchmark harness for heterogeneous federated
//! learning: clients with architecturally different models collaborate by
//! exchanging lightweight knowledge carriers.

pub mod data;
pub mod engine;
pub mod error;
pub mod methods;
pub mod metrics;
pub mod modelzoo;
pub mod numcore;

pub use error::{HtflError, Result};

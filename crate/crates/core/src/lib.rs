//! Distributed asynchronous ADMM over a simulated multi-agent network, with
//! variable per-agent stochastic-Newton work loads, baseline solver
//! variants, a theoretical-rate calculator, and an experiment harness for
//! sparse logistic regression.

pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod objective;
pub mod oracle;
pub mod protocol;
pub mod solver;

pub use error::{Error, Result};

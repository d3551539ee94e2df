//! QoS prediction with multi-order graph attention over user and service
//! attribute graphs, an adversarial interaction module, and classical
//! collaborative-filtering baselines.

pub mod advnet;
pub mod baselines;
pub mod checkpoint;
pub mod dataset;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod mogat;
pub mod nn;
pub mod rng;
pub mod training;

pub use error::{Error, Result};

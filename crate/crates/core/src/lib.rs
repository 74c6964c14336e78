//! Simulator for asynchronous decentralized federated learning of
//! population blood-glucose predictors.
//!
//! Nodes are patients holding private CGM traces. Each round, active nodes
//! average parameters with the neighbors the communication graph gives them,
//! then take a local SGD step. The crate also provides the centralized
//! FedAvg and pooled-data baselines, personalization by fine-tuning and a
//! glucose-specific evaluation suite.

pub mod cohort;
pub mod engine;
pub mod learner;
pub mod metrics;
pub mod rng;
pub mod timeseries;
pub mod topology;

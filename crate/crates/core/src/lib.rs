//! Clustering with a mixture of contrastive experts.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod prototypes;
pub mod report;
pub mod trainer;
pub mod verify;

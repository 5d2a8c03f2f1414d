//! Trajectory flow tensors, pluggable flow prediction and Shapley
//! attribution from grid regions down to individual trajectories.

pub mod attribution;
pub mod flow;
pub mod ingest;
pub mod pipeline;
pub mod predictor;
pub mod regions;
pub mod store;
pub mod synthkit;

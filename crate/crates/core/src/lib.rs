//! Discrete-event simulator for host/CXL-device kernel offloading and result
//! streaming.

pub mod ccm;
pub mod experiment;
pub mod fabric;
pub mod host;
pub mod metrics;
pub mod ring;
pub mod sim;
pub mod simulation;
pub mod workloads;

//! Data-plane intrusion prevention for software-defined networks.
//!
//! The library models an SDN as a topology plus per-device flow tables,
//! computes the trajectories packets are expected to take via a simplified
//! header-space engine, reconstructs the trajectories they actually took
//! from per-hop observations, and hunts for forwarding devices that do not
//! process packets as the control plane intends. Detected misbehavior is
//! classified (replay, misroute, drop, generation, delay), localized to the
//! offending device, and answered through administrator-defined response
//! policies. A deterministic simulation harness generates networks, implants
//! attacks, injects congestion and measures detection quality end to end.
//!
//! Start with the runnable examples (`cargo run --example expected_paths`)
//! or the [`sim`] module for the full pipeline.

pub mod cli;
pub mod detection;
pub mod header;
pub mod hsa;
pub mod netmodel;
pub mod response;
pub mod sim;
pub mod targetid;
pub mod trajectory;
pub mod verify;

/// Simulated time in nanoseconds.
pub type SimNs = u64;

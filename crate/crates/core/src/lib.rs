//! Desk-scale SCADA-in-the-loop harness.

pub mod gateway;
pub mod hub;
pub mod mas;
pub mod microgrid;
pub mod netem;
pub mod node;
pub mod orchestrator;
pub mod scenario;
pub mod sched;

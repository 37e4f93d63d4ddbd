//! GPU tier emulation and energy-aware benchmarking.
//!
//! A stronger GPU is throttled (power limit, core-clock cap, memory-clock cap)
//! until its sustained FP32 throughput matches a weaker reference card. Timed
//! renderer runs are then executed under each tier with concurrent power
//! telemetry, and frame-rate, energy-per-frame and performance-per-watt are
//! reported.
//!
//! Modules follow the pipeline order: [`model`] derives tier plans,
//! [`device`] applies them, [`calibrate`] refines the core clock against a
//! GEMM probe, [`telemetry`] and [`workload`] capture a run, [`metrics`]
//! reduces it, and [`campaign`] drives the whole grid, persisting to
//! [`store`] and rendering through [`report`].

pub mod calibrate;
pub mod campaign;
pub mod device;
pub mod metrics;
pub mod model;
pub mod process;
pub mod report;
pub mod store;
pub mod telemetry;
pub mod workload;

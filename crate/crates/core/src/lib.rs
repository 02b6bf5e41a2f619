//! Token-based auto-scaling and load balancing (TABS) for large server farms.
//!
//! The crate has three engines that share one state vocabulary:
//!
//! * [`simulate`] runs a seeded discrete-event simulation of `N` parallel
//!   queues under TABS, plain join-the-idle-queue (JIQ) and a centralized
//!   delayed-off baseline.
//! * [`fluid`] integrates the deterministic many-server limit of TABS for
//!   exponential and phase-type service, and locates its fixed points.
//! * [`metrics`] turns either kind of trajectory into waiting-time and
//!   energy figures.
//!
//! [`model`] and [`phase`] hold the shared domain types: per-server modes,
//! the dispatcher's token ledger, fluid-scaled occupancy states and
//! phase-type service distributions.

pub mod error;
pub mod fluid;
pub mod metrics;
pub mod model;
pub mod output;
pub mod phase;
pub mod simulate;

pub use error::{Error, Result};
pub use fluid::{FluidParams, FluidSample, FluidTrajectory, ServiceModel};
pub use metrics::{MetricsReport, Snapshot};
pub use model::{ArrivalProfile, DispatcherLedger, EnergyParams, FluidState, Mode, ServerState};
pub use phase::PhaseTypeService;
pub use simulate::{
    run_replications, run_simulation, InitialCondition, Policy, SimConfig, SimOutput, TaskRecord, TraceSample,
};

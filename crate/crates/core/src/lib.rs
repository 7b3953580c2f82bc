//! Resource provisioning for quantum-key-distribution networks that carry
//! federated edge learning traffic.
//!
//! The crate is organised bottom-up:
//!
//! - [`topology`]: the fiber graph, transmission requests, routing and
//!   first-fit wavelength assignment.
//! - [`demand`]: the discrete secret-key-rate scenario space.
//! - [`cost`]: MDI-QKD component counting and reservation / on-demand pricing.
//! - [`allocator`]: deterministic and two-stage stochastic reservation
//!   planning, the EVF and random baselines, and an exhaustive oracle.
//! - [`fel`]: a vertical federated logistic-regression simulator that maps
//!   key-rate budgets to participating workers.

pub mod allocator;
pub mod cost;
pub mod demand;
pub mod fel;
pub mod topology;

pub use allocator::{DemandProfile, SolveError, SolveReport};
pub use cost::{CostTable, PhysicalParams, ProvisioningPlan};
pub use demand::ScenarioSet;
pub use topology::{NetworkTopology, Route, TransmissionRequest};

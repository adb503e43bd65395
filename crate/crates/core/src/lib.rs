//! Per-source Age of Information (AoI) in a slotted, multi-source, bufferless
//! preemptive status-update link with per-source Bernoulli generation and
//! geometric (retransmission-based) service.
//!
//! The crate provides three independent engines for the same system and the
//! machinery to cross-validate them:
//!
//! - [`model`]: configuration validation and the per-source derived
//!   parameters (effective generation probabilities, characteristic roots).
//! - [`analytic`]: closed-form stationary probabilities of the 2D age
//!   process and the per-source AoI p.m.f., tail, and mean, including the
//!   repeated-root limits.
//! - [`dtmc`]: a truncated 2D age chain built directly from the slot-level
//!   transition rules and solved numerically, serving as an oracle for the
//!   closed forms.
//! - [`sim`]: a slot-level Monte Carlo simulator with reproducible seeding
//!   and replication statistics, covering both the retransmission and the
//!   discard-on-failure policies.

pub mod analytic;
pub mod dtmc;
pub mod model;
pub mod sim;

pub use analytic::AoiDistribution;
pub use dtmc::{StationaryGrid, TruncatedChain};
pub use model::{ConfigError, DerivedParams, Source, SystemConfig};
pub use sim::{Policy, SimStats};

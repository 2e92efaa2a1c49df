//! Data-aware workflow meta-orchestration.
//!
//! A typed data warehouse, ABCD-contract apps with smart docking, a DAG
//! scheduler that brokers tasks across compute resources by score, provenance
//! capture with replayable scripts, declarative per-subject pipeline rules, and
//! reduce-step analytics, all driven by a logical clock so simulated runs are
//! deterministic.

pub mod broker;
pub mod digest;
pub mod error;
pub mod exec;
pub mod ids;
pub mod num;
pub mod orchestrator;
mod persist;
pub mod pipeline;
pub mod platform;
pub mod provenance;
pub mod reduce;
pub mod registry;
pub mod sim;
pub mod warehouse;

pub use error::{Error, Result};
pub use ids::{AppId, InstanceId, ObjectId, ProjectId, ResourceId, RuleId, TaskId, Tick, UserId};
pub use num::Real;
pub use platform::{Platform, PlatformConfig};

/// Double-precision reduce types.
pub type TidyTable = reduce::TidyTable<f64>;
pub type ReferenceRange = reduce::ReferenceRange<f64>;
pub type ReferenceEntry = reduce::ReferenceEntry<f64>;
pub type PolyFit = reduce::PolyFit<f64>;
pub type Collation = reduce::Collation<f64>;

/// Single-precision reduce types.
pub type TidyTable32 = reduce::TidyTable<f32>;
pub type ReferenceRange32 = reduce::ReferenceRange<f32>;
pub type ReferenceEntry32 = reduce::ReferenceEntry<f32>;
pub type PolyFit32 = reduce::PolyFit<f32>;
pub type Collation32 = reduce::Collation<f32>;

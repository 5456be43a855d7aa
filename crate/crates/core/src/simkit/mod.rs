//! Seeded Euler–Maruyama simulation of the `N`-agent closed loop, the
//! additive-noise baseline, discounted-cost estimation and consensus
//! metrics.
//!
//! Work is split into replications; each replication simulates its agents
//! one after the other, which is exact because the decentralized feedback
//! of an agent only involves its own state and deterministic offsets.

mod engine;
mod metrics;
pub mod rng;

pub use engine::*;
pub(crate) use engine::with_pool;
pub use metrics::*;

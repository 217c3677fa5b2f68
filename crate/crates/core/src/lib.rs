//! Contractive diffusion policies at desk scale.
//!
//! The crate trains conditional noise-prediction networks `eps(a_t, s, t)` with
//! a penalty on the symmetric part of their action Jacobian, samples from the
//! resulting probability-flow ODE, and measures how contractive the learned
//! flows are. Toy Gaussian-mixture tasks with closed-form perturbed scores act
//! as oracles throughout.

pub mod checkpoint;
pub mod config;
pub mod contraction;
pub mod diagnostics;
pub mod error;
pub mod field;
pub mod linalg;
pub mod network;
pub mod plot;
pub mod sampler;
pub mod schedule;
pub mod toyworld;
pub mod train;

pub use error::{Error, Result};
pub use field::{EpsField, ZeroField};
pub use network::ScoreNetwork;
pub use schedule::{DiscreteSchedule, NoiseSchedule, ScheduleKind};

/// Version string stamped into checkpoints and report rows.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

//! Multi-lane highway micro-simulation with distributed predictive maneuver
//! planning for connected automated vehicles (CAVs).
//!
//! Each CAV runs three on-board blocks every control step:
//!
//! * object-vehicle state prediction ([`ovsp`]): synchronizes plans shared by
//!   peer CAVs to the local planning clock and predicts human-driven vehicles
//!   with linear-feedback models under Kalman filtering;
//! * reference speed assignment ([`rsa`]): fuses on-board and communicated
//!   per-lane traffic speed estimates (with field-of-view deduplication) into
//!   lane reference speeds and a desired speed;
//! * maneuver planning ([`ocp`]): a coupled lane + speed optimal control
//!   problem in Frenet coordinates, solved by an SQP over a direct
//!   multiple-shooting transcription.
//!
//! Human-driven vehicles follow a Wiedemann-99 style car-following model and
//! a rule-based lane selection ([`hdv`]), which also serve as the CAV
//! fallback when the planner reports infeasibility. The synchronous world
//! loop with one-step-delayed V2V messaging lives in [`sim`], post-processing
//! in [`metrics`].
//!
//! Core math is generic over the scalar type via the [`Real`] trait
//! (instantiable at `f32` or `f64`); the simulation engine and file formats
//! pin `f64` through the aliases exported at the crate root.

pub mod ego;
pub mod ocp;
pub mod real;
pub mod road;

pub use real::{fl, Real};

/// Scalar type used by the simulation engine and all file formats.
pub type Scalar = f64;

pub type RoadLink = road::RoadLink<Scalar>;
pub type EgoState = ego::EgoState<Scalar>;
pub type EgoInput = ego::EgoInput<Scalar>;
pub type EgoParams = ego::EgoParams<Scalar>;
pub type OcpConfig = ocp::OcpConfig<Scalar>;
pub type ManeuverPlan = ocp::ManeuverPlan<Scalar>;
pub type ObstacleTrajectory = ocp::ObstacleTrajectory<Scalar>;

//! Flower pose refinement and precision-pollination simulation.
//!
//! Noisy single-shot 6-DoF flower measurements are fused per flower by a
//! Kalman filter whose rotational state lives in R⁹ and is projected back onto
//! SO(3) after each update. A mission state machine consumes the filtered
//! flower map to drive a simulated eye-in-hand arm.
//!
//! All geometry and filtering is generic over [`Real`] (`f32` / `f64`); the
//! `*64` aliases below are what the simulator and CLI use.

// `!(x >= 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibrate;
pub mod camera;
pub mod commander;
pub mod error;
pub mod experiment;
pub mod logs;
pub mod metrics;
pub mod pose;
pub mod scalar;
pub mod simworld;
pub mod so3;
pub mod tracker;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Rotation64 = so3::Rotation<f64>;
pub type Rotation32 = so3::Rotation<f32>;
pub type Pose64 = pose::Pose<f64>;
pub type Pose32 = pose::Pose<f32>;
pub type CameraPose64 = camera::CameraPose<f64>;
pub type Measurement64 = simworld::Measurement<f64>;
pub type Scene64 = simworld::Scene<f64>;
pub type Track64 = tracker::Track<f64>;
pub type GlobalState64 = tracker::GlobalState<f64>;

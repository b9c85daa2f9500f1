//! Wheeled inverted pendulum with motor-current dynamics.
//!
//! * [`params`]: physical constants and limits
//! * [`se2`]: planar rigid motions
//! * [`model`]: continuous dynamics and explicit Runge-Kutta steps
//! * [`varint`]: the discrete variational integrator on SE(2)
//! * [`ocp`]: energy-optimal trajectory planning by direct transcription
//! * [`tracking`]: linear design model, LQR and the delayed-measurement observer
//! * [`sim`]: closed-loop simulation harness

pub mod ad;
pub mod model;
pub mod ocp;
pub mod params;
pub mod se2;
pub mod sim;
pub mod tracking;
pub mod varint;

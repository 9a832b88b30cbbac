//! Hardware-free sEMG teleoperation pipeline for a 22-DOF dexterous hand.
//!
//! The crate is organised around the three phases of an sEMG teleoperation
//! system:
//!
//! * Labelling: [`hand_model`] describes the robot hand (forward
//!   kinematics, joint limits, capsule self-collision) and [`retarget`] maps
//!   human keypoints onto it with damped least squares, clamping unsafe
//!   solutions back onto the collision-free set.
//! * Training: [`data`] holds recordings, windowing and a seeded
//!   muscle-synergy generator; [`net`] is the convolutional/TDS encoder with
//!   an LSTM velocity decoder, including hand-written reverse-mode gradients.
//! * Deployment: [`stream`] runs sliding-window inference with action
//!   chunk execution and state carry-over; [`cli`] wires everything into the
//!   `emgpose` binary and computes evaluation reports.
//!
//! See the `examples/` directory of this crate for one runnable program per
//! capability.

pub mod cli;
mod codec;
pub mod data;
pub mod error;
pub mod hand_model;
pub mod net;
pub mod retarget;
pub mod stream;

pub use error::{Error, Result};
pub use hand_model::{HandPose, KeypointSet, KinematicModel};

/// Number of sEMG channels delivered by the armband.
pub const EMG_CHANNELS: usize = 8;
/// Degrees of freedom of the robot hand.
pub const NUM_DOF: usize = 22;
/// Number of skeletal keypoint frames tracked per hand.
pub const NUM_KEYPOINTS: usize = 35;

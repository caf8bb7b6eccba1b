//! Core library for a one-step robotic reaching workbench: a kinematic arm
//! simulator, from-scratch actor-critic learners (DDPG/TD3/SAC) with replay
//! and goal relabeling, threshold/stage curricula, a framed TCP environment
//! service, and a synthetic top-view vision pipeline.

pub mod agents;
pub mod curriculum;
pub mod envservice;
pub mod environment;
pub mod error;
pub mod kinematics;
pub mod neuralnet;
pub mod rng;
pub mod training;
pub mod vision;

pub use error::{ReachError, Result};

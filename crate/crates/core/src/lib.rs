//! Gentlest ascent dynamics (GAD) for locating index-1 and index-2 saddle
//! points of gradient and non-gradient vector fields.

pub mod error;
pub mod model;
pub mod jacobian;
pub mod dynamics;
pub mod integrate;
pub mod verify;
pub mod problems;

pub use error::{GadError, GadResult, Warning};
pub use model::{DirectionPair, GadState, ProblemSpec, SaddleReport, Vector};
pub mod cli;

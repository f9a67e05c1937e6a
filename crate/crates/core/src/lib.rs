//! Dynamics, derivatives and trajectory optimization for articulated robots
//! with closed kinematic loops.

pub mod closure;
pub mod condyn;
pub mod error;
pub mod lift;
pub mod model;
pub mod ocp;
pub mod rba;
pub mod spatial;

pub use error::{Error, Result};
pub use model::{load_model, Model, MechState};

//! Controlled sweeping processes over moving polyhedra: catch-up simulation,
//! discrete optimal control and dual certificates of optimality.

pub mod discrete_ocp;
pub mod error;
pub mod geometry;
pub mod lp;
pub mod optimality;
pub mod scenarios;
pub mod sweeping;
pub mod variational;

pub use error::{Result, SweepError};

//! Distributed formation control around a static or moving target.
//!
//! Each agent senses the target and its neighbors in a local frame, and
//! drives itself onto a circle of prescribed radius while holding
//! prescribed angular spacings to its neighbors about the target.

pub mod analysis;
pub mod cli;
pub mod controller;
pub mod geometry;
pub mod io;
pub mod simulation;
pub mod topology;

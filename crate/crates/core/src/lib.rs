//! Velocity-selective two-photon Raman resonances in a released cold-atom
//! cloud: simulation of time-of-flight stripe images and recovery of the
//! magnetic field from them.

pub mod analysis;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod export;
pub mod faraday;
pub mod fit;
pub mod imaging;
pub mod model;
pub mod nulling;
pub mod raman;
pub mod rng;

pub use error::{Error, Result};

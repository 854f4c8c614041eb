//! Adaptive vibrotactile spatial-acuity testing.
//!
//! [`psymodel`] defines the Weibull family and its parameter grid, [`bape`]
//! keeps the posterior and picks separations, [`protocol`] runs 2IFC sessions
//! against an [`apparatus`], [`observer`] simulates participants, [`stats`]
//! holds the bias guard and [`analysis`] turns records into cohort results.

pub mod analysis;
pub mod apparatus;
pub mod bape;
pub mod observer;
pub mod protocol;
pub mod psymodel;
pub mod simulation;
pub mod stats;

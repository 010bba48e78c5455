//! Starting velocity models for Laplace-domain waveform inversion.
//!
//! A single preconditioned gradient step away from a constant-velocity model,
//! driven by time-gained traces (equivalently, s-derivatives of the Laplace
//! transform) and analytic half-space Green's functions.

pub mod cli;
pub mod config;
pub mod error;
pub mod field;
pub mod geometry;
pub mod greens;
pub mod laplace;
pub mod objective;
pub mod pipeline;
pub mod sensitivity;
pub mod synthetics;
pub mod trace_io;

pub use error::{Error, ErrorClass, Result};
pub use field::{LaplaceField, Provenance};
pub use geometry::{AcquisitionGeometry, GridSpec, Point, VelocityModel};
pub use objective::{GradientField, ResidualPolicy, SkipCounters};
pub use trace_io::{ShotGather, SurveyDataset};

//! Simulation and reconstruction engine for quantum-correlation light-field
//! microscopy.
//!
//! The forward model samples entangled photon pairs, passes the signal photon
//! through a target and imaging optics, the idler photon through a Fourier
//! system, and records both on time-stamping cameras. The inverse pipeline
//! pairs detections in time, refocuses by ray tracing with the idler-derived
//! angle, retrieves the target amplitude by a Gerchberg–Saxton loop, and
//! builds focal stacks, depth maps and ghost images.

pub mod coincidence;
pub mod config;
pub mod detector;
pub mod error;
mod fft;
pub mod field;
pub mod image;
pub mod io;
pub mod metrics;
pub mod optics;
pub mod pipeline;
pub mod refocus;
pub mod rng;
pub mod scene;
pub mod spdc;
pub mod volumetric;

pub use error::{Error, Result};
pub use field::{inverse_propagate, propagate, ComplexField, Propagator, SpatialFrequencyGrid};
pub use image::{GridSpec, Image};
pub use num_complex::Complex64;

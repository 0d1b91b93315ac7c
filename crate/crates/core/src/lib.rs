//! Core library of a smoothed particle hydrodynamics (SPH) mini-app.
//!
//! The solver advances a weakly compressible fluid with:
//! - sinc-family interpolation kernels with an optional lookup-table fast path,
//! - density summation, grad-h correction factors and matrix-based (IAD)
//!   gradient coefficients,
//! - momentum and energy rates with signal-velocity artificial viscosity,
//! - an octree for bounding-box computation, depth-first particle ordering
//!   and fixed-radius neighbor search (periodic in z),
//! - a simulated multi-rank domain decomposition with halo exchange over an
//!   in-process message channel, and
//! - a driver that runs the rotating-square-patch test case with conservation
//!   diagnostics, checkpointing and communication logging.
//!
//! Particle state lives in structure-of-arrays form ([`ParticleSystem`]) and
//! all floating-point state is `f64`.

pub mod checkpoint;
pub mod domain;
pub mod driver;
pub mod error;
pub mod integrator;
pub mod kernel;
pub mod octree;
pub mod particles;
pub mod physics;
pub mod reduce;
pub mod sqpatch;

pub use error::{Error, Result};
pub use kernel::{Kernel, KernelTable, SincKernel};
pub use octree::{Aabb, Octree, OctreeParams};
pub use particles::{NeighborLists, ParticleSystem};
pub use physics::{AvConfig, EosConfig};
pub use sqpatch::SquarePatchConfig;

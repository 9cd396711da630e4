//! Magnetic induction tomography (MIT) reconstruction workbench.
//!
//! The crate covers the whole pipeline on synthetic data:
//!
//! * [`geometry`]: sensing field, coil ring, the 512-triangle mesh, phantoms and rasterization.
//! * [`forward_sim`]: linear-triangle FEM for the 2D eddy-current problem, measurement frames and noise.
//! * [`dataset`]: phantom sweeps, the binary sample container and position-level splits.
//! * [`nn`] and [`complex_nn`]: real and complex-valued layers with hand-written backward passes.
//! * [`mitnet`]: the complex U-net classifier producing triangle occupancy vectors.
//! * [`gan`]: the conditional GAN that sharpens rendered occupancy maps.
//! * [`baselines`]: Gauss-Newton inversion, FCN and stacked autoencoder reconstructors.
//! * [`metrics`]: IoU, centroid distance and triangle smoothing.
//! * [`harness`]: experiment orchestration used by the `mitnet` CLI.

pub mod baselines;
pub mod checkpoint;
pub mod complex_nn;
pub mod dataset;
pub mod error;
pub mod forward_sim;
pub mod gan;
pub mod geometry;
pub mod harness;
pub mod metrics;
pub mod mitnet;
pub mod nn;
pub mod parallel;
pub mod pgm;
pub mod rng;

pub use error::{Error, Result};

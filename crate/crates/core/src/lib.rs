//! Wave-optics degradation simulator for panoramic annular lens (PAL) imaging.
//!
//! The crate turns clean perspective images into images carrying the
//! aberrations, unfolding resampling and sensor chain of a PAL camera, and
//! measures the result:
//!
//! * [`zernike`]: Fringe-ordered Zernike polynomials and coefficient tables.
//! * [`diffraction`]: pupil functions, FFT focal-plane PSFs and PSF stacks.
//! * [`projection`]: the Taylor-polynomial camera model, annular unfolding,
//!   scale factors and PSF deformation on the unfolded plane.
//! * [`isp`]: forward and inverse ISP with sensor noise.
//! * [`degrade`]: the patch-wise spatially-variant degradation pipeline.
//! * [`metrics`]: PSNR, SSIM, Strehl ratio and MTF measurements.
//! * [`dataset`]: paired dataset generation with reproducible manifests.

// `!(x > 0.0)` deliberately rejects NaN alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod dataset;
pub mod degrade;
pub mod diffraction;
mod error;
pub mod exec;
mod fft;
pub mod image;
pub mod isp;
pub mod metrics;
pub mod prescription;
pub mod projection;
pub mod seed;
pub mod zernike;

pub use crate::error::{Error, Result};
pub use crate::exec::Execution;
pub use crate::image::{ColorState, Geometry, ImagePlane};
pub use crate::prescription::OpticalPrescription;

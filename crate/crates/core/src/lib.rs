//! Desk-scale 360° monocular depth estimation built around cross-projection
//! feature alignment.
//!
//! The crate covers the full pipeline: exact equirectangular ↔ tangent-plane
//! geometry ([`sphere`]), non-uniform patch layouts ([`layout`]), bilinear
//! patch extraction and stitching with longitude wraparound ([`resample`]),
//! a small reverse-mode tensor core ([`nn`]), the encoder/CPFA/decoder/PFAA
//! network ([`model`]), the multi-scale loss suite ([`loss`]) and depth
//! metrics ([`metrics`]).
//!
//! Hot per-pixel loops run under rayon when the default `parallel` feature is
//! enabled and fall back to plain iteration without it; both paths produce
//! bit-identical results (fixed per-element summation order), which the test
//! suite asserts directly.

pub mod error;
pub(crate) mod exec;
pub mod grid;
pub mod io;
pub mod layout;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod resample;
pub mod scene;
pub mod sphere;
pub mod train;

pub use error::{Error, Result};
pub use grid::{Grid, PatchSet};
pub use layout::{LayoutConfig, TangentPlaneSpec};
pub use sphere::LatLon;

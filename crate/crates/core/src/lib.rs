//! Differentiable Gaussian splatting with multiview-guided point management.

// `!(x > 0)` is the NaN-rejecting form used in every parameter check, and the
// small fixed-size matrix kernels read best with explicit indices.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod adc;
pub mod error;
pub mod geom;
pub mod harness;
pub mod linalg;
pub mod manage;
pub mod lpm;
pub mod optimize;
pub mod real;
pub mod render;
pub mod scene;

pub use error::{Error, Result};
pub use real::Real;

pub type Vec2 = linalg::Vec2<f64>;
pub type Vec3 = linalg::Vec3<f64>;
pub type Quat = linalg::Quat<f64>;
pub type Gaussian = scene::Gaussian3D<f64>;
pub type Camera = scene::Camera<f64>;
pub type Scene = scene::Scene<f64>;
pub type Image = scene::ImageBuffer<f64>;

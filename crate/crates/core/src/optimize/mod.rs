//! Photometric loss, Adam updates and the training loop.

pub mod adam;
pub mod loss;
pub mod train;

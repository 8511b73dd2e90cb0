//! WiFi CSI based continuous human pose estimation.
//!
//! The crate covers the full pipeline: Intel 5300 style capture parsing
//! and link fusion ([`csi`]), keypoint label cleaning and skeleton
//! geometry ([`pose`]), the spatio-temporal encoder/decoder network and
//! its autodiff engine ([`model`], [`tensor`]), losses and metrics
//! ([`objectives`]), training/evaluation ([`train`]) and a physics-based
//! synthetic data generator ([`synth`]).

pub mod checks;
pub mod csi;
pub mod model;
pub mod objectives;
pub mod pose;
pub mod synth;
pub mod tensor;
pub mod train;

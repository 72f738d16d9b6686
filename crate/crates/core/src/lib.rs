//! Progressive domain adaptation for object detection on a seeded synthetic
//! benchmark.

pub mod align;
mod codec;
pub mod container;
pub mod detector;
mod error;
pub mod metrics;
pub mod report;
mod nn;
pub mod seed;
pub mod synth;
pub mod translator;
pub mod trainer;

pub use error::CoreError;

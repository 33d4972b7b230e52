//! Frozen vision-transformer feature injection for YOLO-style detectors.

pub mod detector;
pub mod error;
pub mod evaluation;
pub mod harness;
pub mod injection;
pub mod numeric;
pub mod teacher;
pub mod training;

pub use error::{Error, Result};

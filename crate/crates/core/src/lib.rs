//! Task-prompted semi-supervised segmentation of 3-D volumes from partially
//! labeled, task-specific datasets.

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mixer;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tasks;
pub mod trainer;

pub use error::{Error, Result};
pub use tasks::{PromptVector, TaskRegistry, ALL_FOREGROUND};

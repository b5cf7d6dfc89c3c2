//! Semi-supervised multi-task learning over partially annotated datasets.
//!
//! A shared-encoder generator predicts segmentation and inverse depth. Each
//! task has a discriminator that classifies a map as ground truth or as a
//! prediction from a particular dataset, and the generator is trained both on
//! the labels each dataset provides and adversarially on the tasks it lacks.

pub mod checkpoint;
mod error;
pub mod experiment;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};

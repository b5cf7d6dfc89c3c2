//! Procedural scenes for multi-domain, partially annotated multi-task training.
//!
//! Each dataset renders sky/ground/object scenes under its own domain knobs
//! (gain, palette shift, noise, object density) and declares which tasks it
//! annotates. Training views hide the other tasks; evaluation views do not.

mod batch;
mod dataset;
mod error;
mod scene;
mod spec;
pub mod store;

pub use batch::{assemble, Batch, BatchIterator};
pub use dataset::{make_dataset, make_test_dataset, Dataset};
pub use error::{Result, SceneError};
pub use scene::{
    ground_inv_depth, plan_scene, rasterize, render_scene, ObjectShape, Raster, Sample, SceneLayout, SceneObject,
};
pub use spec::{DatasetSpec, DomainConfig, Task, CLASS_BOX, CLASS_DISK, CLASS_GROUND, CLASS_SKY};

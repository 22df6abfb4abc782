//! Anomaly detection on engine cruise snapshots.
//!
//! Operational measurements are first corrected for the flight context with
//! a per-cluster linear model. The residuals are then projected on a
//! self-organizing map, and a row is flagged when its distance to the map
//! leaves the interval calibrated on healthy training data.

pub mod context;
pub mod correction;
pub mod detect;
pub mod error;
pub mod eval;
pub mod inject;
pub mod pipeline;
pub mod render;
pub mod schema;
pub mod som;
pub mod synth;

pub use error::{Error, Result};
pub use pipeline::{test_pipeline, train_pipeline, ModelBundle, PipelineConfig};
pub use schema::{DataTable, RowKey, Schema, Snapshot};

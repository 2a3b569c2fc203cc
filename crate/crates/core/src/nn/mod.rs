//! Desk-scale quantized CNN training.

pub mod data;
pub mod model;
pub mod train;

pub use data::{synthetic_shapes, Dataset};
pub use model::{ForwardMode, Gradients, Layer, Model, QuantScheme, ToySpec, WeightScheme};
pub use train::{train, two_stage_train, MetricRow, TrainConfig};

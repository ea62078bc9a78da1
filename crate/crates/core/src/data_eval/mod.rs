//! Instance files, synthetic data and evaluation metrics.

mod instance;
mod metrics;
mod synthetic;

pub use instance::{
    load_dataset, load_instance, save_dataset, save_instance, Dataset, Dims, FrameRecord, GroundTruth, GtBox, Manifest,
    ObjectRecord, QAInstance, DEFAULT_FRAME_SIZE,
};
pub use metrics::{evaluate, Metrics, Prediction, ASA_IOU};
pub use synthetic::{generate_synthetic, linear_probe_accuracy, Synthetic, SyntheticConfig};

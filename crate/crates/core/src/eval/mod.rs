//! LOSO orchestration, metrics, reports, Grad-CAM and run configuration.

pub mod config;
pub mod gradcam;
pub mod loso;
pub mod metrics;
pub mod report;

pub use config::RunConfig;
pub use gradcam::{gradcam, overlay, Heatmap};
pub use loso::{pool_predictions, run_loso, train_fold};
pub use metrics::{confusion, uar, uf1, ConfusionMatrix};
pub use report::MetricsReport;

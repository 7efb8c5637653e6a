//! Training loop, evaluation metrics, ablation matrix, configuration and
//! checkpoint plumbing behind the command-line surface.

pub mod ablate;
pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod train;

pub use ablate::{ablate, default_rows, AblateRow};
pub use config::{parse_kv_file, parse_kv_text, GenRunConfig, RunConfig};
pub use gradcheck::{run_gradcheck, GradcheckReport};
pub use metrics::{ConfusionMatrix, MetricsRecord};
pub use train::{evaluate, train, TrainOutcome};

//! Training driver: configuration, replay, the collect/update loop,
//! evaluation, metrics, checkpoints and plots.

pub mod buffer;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod plot;
pub mod train;

pub use buffer::{ReplayBuffer, Transition, WindowBatch};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{NoiseSchedule, Precision, RunConfig};
pub use metrics::{read_metrics, MetricsRow, MetricsWriter};
pub use plot::emit_plots;
pub use train::{oracle_baseline, random_policy_returns, EvalResult, Trainer};

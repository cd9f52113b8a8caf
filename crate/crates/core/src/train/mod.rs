//! Training, evaluation, checkpoints and topology export.

mod checkpoint;
mod config;
mod eval;
mod export;
mod optim;
mod trainer;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use eval::{evaluate, predict_labels, EvalReport};
pub use export::{anchor_csv, averaged_topologies, export_topology, matrix_csv, pgm_bytes, TopologyExport};
pub use optim::Sgd;
pub use trainer::{argmax_rows, metrics_csv, prepare, EpochMetrics, Trainer, METRICS_HEADER};

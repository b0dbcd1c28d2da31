//! Model assembly, implicit backward pass, optimisation and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod model;
pub mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Manifest};
pub use model::{derive_seed, BackwardStats, ForwardCache, Mode, Model, ModelConfig, PreparedGraph};
pub use trainer::{bce_grad, bce_loss, evaluate, metrics_csv, Classifier, MetricsRow, Split, TrainConfig, Trainer};

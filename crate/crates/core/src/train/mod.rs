//! Layer-wise training, evaluation and reference imputers.

mod eval;
mod loss;
mod trainer;

pub use eval::{evaluate, evaluate_windows, Imputer, KnnImputer, MeanImputer};
pub use loss::spin_loss;
pub use trainer::{example_gradients, train, write_history_csv, EpochRecord, Subsample, TrainConfig, TrainReport};

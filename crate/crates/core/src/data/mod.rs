//! Dataset ingestion, windowing, missing-data injection and metrics.

mod dataset;
mod inject;
mod metrics;
pub mod synth;

pub use dataset::{write_grid, write_mask, Dataset, NormStats, SpatioTemporalWindow, Split};
pub use inject::{
    inject_block_missing, inject_point_missing, inject_sparsity_sweep, training_whiten, training_whiten_with_ratio,
    whiten_count, BlockPolicy, Injection, InjectionReport, Whitened, WHITEN_RATIOS,
};
pub use metrics::{abs_error_sum, mae, MaeAccumulator, Metrics};

//! Dense arrays, the reverse-mode tape and the pieces built on it
//! (perceptrons, Adam, checkpoints).

mod array;
pub mod attention;
mod mlp;
mod optim;
mod params;
mod tape;

pub use array::Tensor;
pub use attention::{AttentionLayout, Segment, LOGIT_CLAMP};
pub use mlp::{Mlp, MlpSpec};
pub use optim::{clip_global_norm, Adam, AdamConfig, LrSchedule};
pub use params::{BoundParams, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Value};

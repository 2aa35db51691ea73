//! Multi-task sequence learning with graph-structured communication between
//! task encoders.
//!
//! Each task owns an LSTM encoder. In complete-graph mode every task attends
//! over the other tasks' hidden states at each step; in star-graph mode each
//! task attends over the states of one shared LSTM. The aggregated message
//! enters the task's recurrent update through a fusion gate.

pub mod cells;
pub mod checkpoint;
pub mod data;
mod error;
pub mod gradcheck;
pub mod heads;
pub mod interpret;
pub mod message;
pub mod model;
pub mod params;
pub mod primitive;
pub mod suite;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use message::{CommMode, MessageTrace, TaskGraph};
pub use model::{Model, ModelConfig, TaskInfo};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

//! Self-gated memory (SGM) recurrent network for fusing multi-exposure image
//! stacks of any length into a single HDR image.

pub mod autodiff;
pub mod cells;
pub mod data;
pub mod error;
pub mod hdr;
pub mod layers;
pub mod network;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use cells::{Cell, CellKind, CellState};
pub use data::{generate, ExposureSequence, SceneSpec};
pub use error::{Error, Result};
pub use hdr::TonemapConfig;
pub use layers::{Bound, ParamRegistry};
pub use network::{FusionNet, Mode, NetConfig, SequenceBatch};
pub use tensor::{DType, Element, Tensor};
pub use train::{Checkpoint, TrainConfig, Trainer};

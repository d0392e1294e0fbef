//! Minimal dense-tensor network engine for 1-D signal classifiers.

pub mod checkpoint;
pub mod count;
pub mod init;
pub mod layer;
pub mod model;
pub mod presets;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use count::{count_flops, count_params};
pub use init::kaiming_init;
pub use layer::{BatchNorm1d, Conv1d, Dense, Mode, PrimitiveLayer};
pub use model::{ModelGraph, Skip, Unit, INPUT_CHANNELS};
pub use presets::Preset;
pub use tensor::{Scalar, Tensor};
pub use train::{backward_and_step, ExampleSource, TrainConfig};

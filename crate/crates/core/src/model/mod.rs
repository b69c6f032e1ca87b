//! The assembled two-stream network, its configuration and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod inception;
pub mod network;

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, Checkpoint, CheckpointMeta};
pub use config::{BackboneScale, BoNetConfig};
pub use inception::InceptionV3;
pub use network::{count_parameters, BoNetPlus, ForwardOutput, Model, Taps};

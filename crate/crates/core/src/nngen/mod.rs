//! Conditional diffusion generator trained from scratch: patch extractors,
//! a transformer denoiser with cross-attention onto source tokens, and a
//! linear unpatcher back to target signals.

pub mod checkpoint;
pub mod diffuser;
pub mod model;
pub mod pipeline;
pub mod schedule;
pub mod tape;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use diffuser::Diffuser;
pub use model::{Batch, ModelConfig, ParamStore, TokenShapes};
pub use pipeline::{fit, TrainedModel};
pub use schedule::{forward_diffuse, NoiseSchedule, ScheduleConfig};
pub use train::{train, EpochLoss, LossCurve, TrainConfig};

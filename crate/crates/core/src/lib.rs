//! Generative cellular automata at desk scale.
//!
//! A grid of pix-cells grows an image from a single seeded center cell. One
//! shared transformer block with window-local attention updates each cell
//! from its Moore neighborhood; a denoising-diffusion objective trains the
//! block; reverse sampling carries each cell's hidden state across timesteps
//! (gene heredity) with optional classifier-free guidance. A dataset
//! expansion harness feeds the samples to a small multi-label classifier.

pub mod checkpoint;
pub mod diffusion;
pub mod expansion;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod grid;
pub mod optim;
pub mod reference;
pub mod rule;
pub mod sampler;
pub mod tape;
pub mod tensor;

pub use diffusion::{build_schedule, NoiseSchedule, ScheduleKind, TrainConfig};
pub use error::{GecaError, Result};
pub use expansion::LabeledDataset;
pub use grid::{ChannelLayout, GridSeed, PixCellGrid};
pub use rule::{LabelCond, ThetaParams, UpdateMask};
pub use sampler::{InheritanceMode, MSchedule, SamplerConfig, StepVariant};
pub use tape::{Tape, TensorId};
pub use tensor::Tensor;

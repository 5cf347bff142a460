//! Toy conditional diffusion: exact GMM denoiser, noise schedule, latent-aware
//! attention, and the guided Euler sampler.

pub mod attention;
pub mod model;
pub mod sampler;
pub mod schedule;

pub use attention::{AttentionProvider, DEFAULT_BIAS_WEIGHT};
pub use model::{distance, GmmComponent, GmmConditionalModel, ModelParams};
pub use sampler::{CdgSampler, MaskSource, PreparedPrompt, SamplerRun, StepRecord, ToySetup};
pub use schedule::{ScheduleParams, SigmaSchedule};

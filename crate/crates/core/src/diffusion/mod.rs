//! Toy conditional DDPM: schedule, MLP denoiser, samplers and training.

pub mod denoiser;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use denoiser::{
    time_embedding, Denoiser, DenoiserShape, DenoiserVars, Linear, QuantizedDenoiser,
};
pub use sampler::{collect_calibration, sample_batch, SampleJob, SamplerOutput, StepGroups};
pub use schedule::{forward_noise, posterior_mean, reverse_step, DiffusionSchedule};
pub use train::{train_denoiser, DenoiserTraining};

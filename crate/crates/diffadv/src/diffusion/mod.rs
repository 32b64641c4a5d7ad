//! Numerical substrate: noise schedules and deterministic DDIM stepping.

pub mod schedule;
pub mod step;

pub use schedule::{
    DiffusionSchedule, ScheduleSpec, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_TRAIN_STEPS,
};
pub use step::{
    cfg_predict, ddim_denoise_step, ddim_invert_step, denoise_full, forward_diffuse,
    ConditionEmbedding, EmbeddingKind, LatentState,
};

//! Diffusion-latent adversarial example toolkit.
//!
//! The crate maps images into a diffusion model's latent space by
//! deterministic DDIM inversion with per-step null-embedding optimization,
//! perturbs the terminal latent along an adversarial direction inside an
//! ∞-norm budget using momentum sign ascent with a skip-gradient
//! approximation, and evaluates the resulting images for attack success and
//! cross-model transfer, including codec-level input defenses.
//!
//! Everything runs at desk scale against a small trainable backend; a real
//! text-to-image backend can be plugged in behind the same
//! [`models::NoisePredictor`] interface.
//!
//! Entry points:
//! - [`diffusion`]: schedules and DDIM stepping.
//! - [`models`]: predictor/classifier interfaces, the toy backend, fitting.
//! - [`inversion`]: image-to-latent mapping ([`inversion::map_image`]).
//! - [`attack`]: latent-space attack loop ([`attack::run_attack`]).
//! - [`harness`]: success rates, transfer matrices, defenses, reports.
//! - [`cli`]: batch commands behind the `diffadv` binary.

pub mod attack;
pub mod cli;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod inversion;
pub mod io;
pub mod models;

pub use error::{Error, Result};

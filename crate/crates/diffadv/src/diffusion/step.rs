//! Deterministic DDIM stepping: forward diffusion, inversion, guided
//! denoising, and the full denoising composition.
//!
//! Ladder slots index positions on the inference ladder: slot 0 is the clean
//! image (cumulative alpha 1), slot `k >= 1` sits at train timestep
//! `inference_steps[k-1]`. Both steppers evaluate the predictor at the
//! current running latent and the current slot's train timestep; the virtual
//! clean slot borrows the first ladder timestep.

use ndarray::{Array1, Array3};

use crate::diffusion::schedule::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::models::NoisePredictor;

/// Whether an embedding came from a real prompt or the null text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Text,
    Null,
}

/// A condition embedding vector with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub values: Array1<f64>,
    pub kind: EmbeddingKind,
}

impl ConditionEmbedding {
    pub fn text(values: Array1<f64>) -> Self {
        Self { values, kind: EmbeddingKind::Text }
    }

    pub fn null(values: Array1<f64>) -> Self {
        Self { values, kind: EmbeddingKind::Null }
    }
}

/// A latent array positioned on the inference ladder.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub values: Array3<f64>,
    /// Ladder slot: 0 = clean image, `k >= 1` = `inference_steps[k-1]`.
    pub slot: usize,
}

impl LatentState {
    pub fn new(values: Array3<f64>, slot: usize) -> Self {
        Self { values, slot }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Classifier-free guidance prediction:
/// `w * eps(z, t, cond) + (1 - w) * eps(z, t, null)`.
///
/// At `w = 1` only the conditional branch is evaluated, so the result is
/// exactly the conditional prediction (and the null branch cannot poison it
/// with non-finite values).
pub fn cfg_predict(
    z: &Array3<f64>,
    t: usize,
    cond: &ConditionEmbedding,
    null: &ConditionEmbedding,
    w: f64,
    model: &dyn NoisePredictor,
) -> Result<Array3<f64>> {
    let eps_cond = model.predict(z, t, cond)?;
    if eps_cond.shape() != z.shape() {
        return Err(Error::Shape(format!(
            "predictor output shape {:?} differs from latent shape {:?}",
            eps_cond.shape(),
            z.shape()
        )));
    }
    if w == 1.0 {
        return Ok(eps_cond);
    }
    let eps_null = model.predict(z, t, null)?;
    if eps_null.shape() != z.shape() {
        return Err(Error::Shape(format!(
            "predictor output shape {:?} differs from latent shape {:?}",
            eps_null.shape(),
            z.shape()
        )));
    }
    if w == 0.0 {
        return Ok(eps_null);
    }
    Ok(&eps_cond * w + &eps_null * (1.0 - w))
}

/// `sqrt(1/a - 1)`, the noise-to-signal coordinate of a cumulative alpha.
fn noise_coord(alpha_bar: f64) -> f64 {
    (1.0 / alpha_bar - 1.0).sqrt()
}

/// One deterministic inversion step: ladder slot `k -> k + 1`.
///
/// `z_hi = sqrt(ab_hi/ab_lo) * z_lo
///        + sqrt(ab_hi) * (sqrt(1/ab_hi - 1) - sqrt(1/ab_lo - 1)) * eps`
/// with `eps` evaluated at the current latent and slot timestep.
pub fn ddim_invert_step(
    z: &LatentState,
    cond: &ConditionEmbedding,
    model: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
) -> Result<LatentState> {
    let k = z.slot;
    if k >= schedule.num_steps() {
        return Err(Error::Parameter(format!(
            "cannot invert past the last ladder slot ({k} of {})",
            schedule.num_steps()
        )));
    }
    let ab_lo = schedule.alpha_bar_at_slot(k)?;
    let ab_hi = schedule.alpha_bar_at_slot(k + 1)?;
    let t = schedule.slot_timestep(k)?;
    let eps = model.predict(&z.values, t, cond)?;
    if eps.shape() != z.values.shape() {
        return Err(Error::Shape(format!(
            "predictor output shape {:?} differs from latent shape {:?}",
            eps.shape(),
            z.values.shape()
        )));
    }
    let scale = (ab_hi / ab_lo).sqrt();
    let noise_scale = ab_hi.sqrt() * (noise_coord(ab_hi) - noise_coord(ab_lo));
    let values = &z.values * scale + &eps * noise_scale;
    debug_assert!(values.iter().all(|v| v.is_finite()));
    Ok(LatentState::new(values, k + 1))
}

/// One guided denoising step: ladder slot `k -> k - 1`.
///
/// Mirror image of [`ddim_invert_step`] with the noise prediction replaced by
/// the classifier-free-guided prediction.
pub fn ddim_denoise_step(
    z: &LatentState,
    cond: &ConditionEmbedding,
    null: &ConditionEmbedding,
    w: f64,
    model: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
) -> Result<LatentState> {
    let k = z.slot;
    if k == 0 || k > schedule.num_steps() {
        return Err(Error::Parameter(format!(
            "cannot denoise from ladder slot {k} (ladder has {} steps)",
            schedule.num_steps()
        )));
    }
    let ab_hi = schedule.alpha_bar_at_slot(k)?;
    let ab_lo = schedule.alpha_bar_at_slot(k - 1)?;
    let t = schedule.slot_timestep(k)?;
    let eps = cfg_predict(&z.values, t, cond, null, w, model)?;
    let scale = (ab_lo / ab_hi).sqrt();
    let noise_scale = ab_lo.sqrt() * (noise_coord(ab_lo) - noise_coord(ab_hi));
    let values = &z.values * scale + &eps * noise_scale;
    debug_assert!(values.iter().all(|v| v.is_finite()));
    Ok(LatentState::new(values, k - 1))
}

/// Closed-form forward diffusion to train step `t`:
/// `sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_diffuse(
    z0: &Array3<f64>,
    t: usize,
    eps: &Array3<f64>,
    schedule: &DiffusionSchedule,
) -> Result<Array3<f64>> {
    if eps.shape() != z0.shape() {
        return Err(Error::Shape(format!(
            "noise shape {:?} differs from signal shape {:?}",
            eps.shape(),
            z0.shape()
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    Ok(z0 * ab.sqrt() + eps * (1.0 - ab).sqrt())
}

/// Full denoising composition from the terminal slot down to the clean slot,
/// using one null embedding per ladder step (`nulls[k-1]` at slot `k`).
pub fn denoise_full(
    z_terminal: &LatentState,
    cond: &ConditionEmbedding,
    nulls: &[ConditionEmbedding],
    w: f64,
    model: &dyn NoisePredictor,
    schedule: &DiffusionSchedule,
) -> Result<Array3<f64>> {
    let steps = schedule.num_steps();
    if z_terminal.slot != steps {
        return Err(Error::Parameter(format!(
            "terminal latent sits at slot {}, expected {steps}",
            z_terminal.slot
        )));
    }
    if nulls.len() != steps {
        return Err(Error::Parameter(format!(
            "need one null embedding per step: got {}, expected {steps}",
            nulls.len()
        )));
    }
    let mut state = z_terminal.clone();
    for k in (1..=steps).rev() {
        state = ddim_denoise_step(&state, cond, &nulls[k - 1], w, model, schedule)?;
    }
    Ok(state.values)
}

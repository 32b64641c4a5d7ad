//! Noise schedules: per-step betas, cumulative alphas, and the inference
//! timestep ladder used for deterministic sampling and inversion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training horizon of the default schedule.
pub const DEFAULT_TRAIN_STEPS: usize = 1000;
/// Default scaled-linear beta range.
pub const DEFAULT_BETA_START: f64 = 0.000_85;
pub const DEFAULT_BETA_END: f64 = 0.012;

/// Noise schedule constants plus the inference timestep subset.
///
/// `alpha_bars[t]` is the cumulative product of `1 - beta` up to and
/// including train step `t` (0-based). The clean image occupies a virtual
/// slot below `alpha_bars[0]` with cumulative alpha exactly 1.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    total_train_steps: usize,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
    inference_steps: Vec<usize>,
}

/// JSON document form of a schedule: the four generating parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScheduleSpec {
    pub total_train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(rename = "T")]
    pub steps: usize,
}

impl DiffusionSchedule {
    /// Build a scaled-linear schedule (linear interpolation of `sqrt(beta)`,
    /// then squared) with `steps` evenly spaced inference timesteps placed
    /// trailing-aligned so the ladder ends at the last train step.
    pub fn scaled_linear(
        total_train_steps: usize,
        beta_start: f64,
        beta_end: f64,
        steps: usize,
    ) -> Result<Self> {
        if total_train_steps == 0 {
            return Err(Error::Parameter("total_train_steps must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "beta range must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        if steps == 0 || steps > total_train_steps {
            return Err(Error::Parameter(format!(
                "inference steps must satisfy 1 <= T <= {total_train_steps}, got {steps}"
            )));
        }
        let betas = scaled_linear_betas(total_train_steps, beta_start, beta_end);
        let stride = total_train_steps / steps;
        let inference_steps: Vec<usize> = (0..steps)
            .map(|i| (total_train_steps - 1) - (steps - 1 - i) * stride)
            .collect();
        Self::from_parts(total_train_steps, beta_start, beta_end, betas, inference_steps)
    }

    /// Build a schedule with an explicit inference ladder. The ladder may be
    /// empty, which models the degenerate zero-step mapping where the latent
    /// is the image itself.
    pub fn with_inference_steps(
        total_train_steps: usize,
        beta_start: f64,
        beta_end: f64,
        inference_steps: Vec<usize>,
    ) -> Result<Self> {
        if total_train_steps == 0 {
            return Err(Error::Parameter("total_train_steps must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Parameter(format!(
                "beta range must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let betas = scaled_linear_betas(total_train_steps, beta_start, beta_end);
        Self::from_parts(total_train_steps, beta_start, beta_end, betas, inference_steps)
    }

    /// The default schedule at a given ladder length.
    pub fn default_with_steps(steps: usize) -> Result<Self> {
        Self::scaled_linear(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END, steps)
    }

    /// Build a schedule from explicit per-step betas. Betas need not be
    /// monotone; each must lie in `(0, 1)`. Round-tripping through
    /// [`ScheduleSpec`] is only lossless for scaled-linear schedules.
    pub fn from_betas(betas: Vec<f64>, inference_steps: Vec<usize>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Parameter("beta sequence must be non-empty".into()));
        }
        let start = betas[0];
        let end = betas[betas.len() - 1];
        let total = betas.len();
        Self::from_parts(total, start, end, betas, inference_steps)
    }

    fn from_parts(
        total_train_steps: usize,
        beta_start: f64,
        beta_end: f64,
        betas: Vec<f64>,
        inference_steps: Vec<usize>,
    ) -> Result<Self> {
        for (i, &b) in betas.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Parameter(format!("beta[{i}] = {b} outside (0,1)")));
            }
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        for w in inference_steps.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Parameter(format!(
                    "inference steps must be strictly increasing, got {:?} before {:?}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&last) = inference_steps.last() {
            if last >= total_train_steps {
                return Err(Error::Parameter(format!(
                    "inference step {last} exceeds train horizon {total_train_steps}"
                )));
            }
        }
        Ok(Self {
            total_train_steps,
            beta_start,
            beta_end,
            betas,
            alpha_bars,
            inference_steps,
        })
    }

    pub fn total_train_steps(&self) -> usize {
        self.total_train_steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn inference_steps(&self) -> &[usize] {
        &self.inference_steps
    }

    /// Number of inference steps (the ladder length `T`).
    pub fn num_steps(&self) -> usize {
        self.inference_steps.len()
    }

    /// Cumulative alpha at a train step index.
    pub fn alpha_bar(&self, train_step: usize) -> Result<f64> {
        self.alpha_bars
            .get(train_step)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("train step {train_step} out of range")))
    }

    /// Cumulative alpha at a ladder slot. Slot 0 is the clean image and has
    /// cumulative alpha exactly 1; slot `k >= 1` maps to `inference_steps[k-1]`.
    pub fn alpha_bar_at_slot(&self, slot: usize) -> Result<f64> {
        if slot == 0 {
            return Ok(1.0);
        }
        let t = self
            .inference_steps
            .get(slot - 1)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("ladder slot {slot} out of range")))?;
        self.alpha_bar(t)
    }

    /// Train timestep fed to the noise predictor when stepping at `slot`.
    /// The virtual clean slot borrows the first ladder timestep.
    pub fn slot_timestep(&self, slot: usize) -> Result<usize> {
        if self.inference_steps.is_empty() {
            return Err(Error::Parameter("schedule has an empty inference ladder".into()));
        }
        if slot == 0 {
            return Ok(self.inference_steps[0]);
        }
        self.inference_steps
            .get(slot - 1)
            .copied()
            .ok_or_else(|| Error::Parameter(format!("ladder slot {slot} out of range")))
    }

    /// `1 / sqrt(alpha_bar)` at the final train step: the sensitivity of the
    /// clean slot with respect to the terminal latent when the predictor is
    /// treated as constant (about 14.58 on the default schedule).
    pub fn terminal_scale(&self) -> f64 {
        1.0 / self.alpha_bars[self.alpha_bars.len() - 1].sqrt()
    }

    pub fn to_spec(&self) -> ScheduleSpec {
        ScheduleSpec {
            total_train_steps: self.total_train_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            steps: self.inference_steps.len(),
        }
    }

    pub fn from_spec(spec: &ScheduleSpec) -> Result<Self> {
        Self::scaled_linear(spec.total_train_steps, spec.beta_start, spec.beta_end, spec.steps)
    }
}

fn scaled_linear_betas(n: usize, beta_start: f64, beta_end: f64) -> Vec<f64> {
    let s0 = beta_start.sqrt();
    let s1 = beta_end.sqrt();
    (0..n)
        .map(|i| {
            let frac = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            let s = s0 + (s1 - s0) * frac;
            s * s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_terminal_scale_matches_reference_constant() {
        let s = DiffusionSchedule::scaled_linear(1000, 0.000_85, 0.012, 50).unwrap();
        let scale = s.terminal_scale();
        assert!(
            (14.0..=15.2).contains(&scale),
            "terminal scale {scale} outside [14.0, 15.2]"
        );
        // Reference value quoted for this schedule.
        assert!((scale - 14.58).abs() < 0.6, "terminal scale {scale} far from 14.58");
    }

    #[test]
    fn constant_beta_alphas_have_closed_form() {
        let b = 0.05;
        let s = DiffusionSchedule::scaled_linear(10, b, b, 10).unwrap();
        for (t, &ab) in s.alpha_bars().iter().enumerate() {
            let expect = (1.0 - b).powi(t as i32 + 1);
            assert!((ab - expect).abs() < 1e-12, "alpha_bar[{t}] = {ab}, expected {expect}");
        }
        assert_eq!(s.inference_steps(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn inference_ladder_is_even_and_increasing() {
        let s = DiffusionSchedule::scaled_linear(1000, 0.000_85, 0.012, 50).unwrap();
        let steps = s.inference_steps();
        assert_eq!(steps.len(), 50);
        assert!(steps.windows(2).all(|w| w[1] > w[0]));
        assert!(steps.windows(2).all(|w| w[1] - w[0] == 20));
        assert_eq!(*steps.last().unwrap(), 999);
    }

    #[test]
    fn alpha_bars_strictly_decreasing_and_first_near_one() {
        let s = DiffusionSchedule::default_with_steps(50).unwrap();
        let ab = s.alpha_bars();
        assert!(ab.windows(2).all(|w| w[1] < w[0]));
        assert!(ab[0] > 0.99);
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(DiffusionSchedule::scaled_linear(1000, 0.0, 0.01, 50).is_err());
        assert!(DiffusionSchedule::scaled_linear(1000, 0.02, 0.01, 50).is_err());
        assert!(DiffusionSchedule::scaled_linear(1000, 0.001, 1.0, 50).is_err());
        assert!(DiffusionSchedule::scaled_linear(1000, 0.001, 0.01, 0).is_err());
        assert!(DiffusionSchedule::scaled_linear(1000, 0.001, 0.01, 1001).is_err());
        assert!(DiffusionSchedule::scaled_linear(0, 0.001, 0.01, 1).is_err());
    }

    #[test]
    fn virtual_slot_has_unit_alpha_and_borrowed_timestep() {
        let s = DiffusionSchedule::default_with_steps(50).unwrap();
        assert_eq!(s.alpha_bar_at_slot(0).unwrap(), 1.0);
        assert_eq!(s.slot_timestep(0).unwrap(), s.inference_steps()[0]);
        assert_eq!(s.slot_timestep(50).unwrap(), 999);
        assert!(s.alpha_bar_at_slot(51).is_err());
    }

    #[test]
    fn spec_document_round_trips() {
        let s = DiffusionSchedule::default_with_steps(50).unwrap();
        let json = serde_json::to_string(&s.to_spec()).unwrap();
        assert!(json.contains("\"T\":50"));
        let back: ScheduleSpec = serde_json::from_str(&json).unwrap();
        let s2 = DiffusionSchedule::from_spec(&back).unwrap();
        assert_eq!(s.alpha_bars(), s2.alpha_bars());
        assert_eq!(s.inference_steps(), s2.inference_steps());
    }
}

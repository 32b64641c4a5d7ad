//! Abstract model interfaces: the noise predictor behind the diffusion
//! steppers and the image classifiers under attack.

use ndarray::{Array1, Array3};

use crate::diffusion::ConditionEmbedding;
use crate::error::{Error, Result};

/// Loss selector for classifier input gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// `-log softmax(logits)[label]`
    CrossEntropy,
}

/// Noise prediction backend of a diffusion model.
///
/// Implementations are pure functions of `(z, t, e)` for fixed weights.
/// Pixel-space backends use identity `decode`; a latent-space backend adapter
/// carries its decoder (and the decoder's vector-Jacobian product) here so
/// gradients can cross it.
pub trait NoisePredictor: Send + Sync {
    /// Shape of latents `[channels, height, width]`.
    fn latent_shape(&self) -> [usize; 3];

    /// Length of condition embedding vectors.
    fn embedding_dim(&self) -> usize;

    /// Whether `embed_vjp` is implemented.
    fn differentiable(&self) -> bool {
        false
    }

    /// Whether concurrent `predict` calls are safe.
    fn concurrent_safe(&self) -> bool {
        false
    }

    /// Predicted noise for latent `z` at train timestep `t` under embedding `e`.
    fn predict(&self, z: &Array3<f64>, t: usize, e: &ConditionEmbedding) -> Result<Array3<f64>>;

    /// Vector-Jacobian product of `predict` with respect to the embedding:
    /// returns `(d predict / d e)^T · cotangent`.
    fn embed_vjp(
        &self,
        z: &Array3<f64>,
        t: usize,
        e: &ConditionEmbedding,
        cotangent: &Array3<f64>,
    ) -> Result<Array1<f64>> {
        let _ = (z, t, e, cotangent);
        Err(Error::Capability(
            "noise predictor does not expose embedding gradients".into(),
        ))
    }

    /// Prompt encoder; the empty string encodes the null text.
    fn embed_prompt(&self, prompt: &str) -> ConditionEmbedding;

    /// Latent-to-image transform. Identity for pixel-space backends.
    fn decode(&self, z: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(z.clone())
    }

    /// Vector-Jacobian product of `decode`. Identity for pixel-space backends.
    fn decode_vjp(&self, z: &Array3<f64>, cotangent: &Array3<f64>) -> Result<Array3<f64>> {
        let _ = z;
        Ok(cotangent.clone())
    }

    /// Validate an input latent against the declared shape.
    fn check_latent(&self, z: &Array3<f64>) -> Result<()> {
        let shape = self.latent_shape();
        if z.shape() != shape {
            return Err(Error::Shape(format!(
                "latent shape {:?} does not match predictor shape {:?}",
                z.shape(),
                shape
            )));
        }
        Ok(())
    }
}

/// Image classifier interface.
pub trait Classifier: Send + Sync {
    fn num_classes(&self) -> usize;

    /// Expected input shape `[channels, height, width]`, values in `[0, 1]`.
    fn input_shape(&self) -> [usize; 3];

    /// Whether `input_gradient` is implemented.
    fn differentiable(&self) -> bool {
        false
    }

    fn concurrent_safe(&self) -> bool {
        false
    }

    /// Raw class scores; length equals `num_classes()`.
    fn logits(&self, x: &Array3<f64>) -> Result<Array1<f64>>;

    /// Gradient of the selected loss with respect to the input image.
    fn input_gradient(&self, x: &Array3<f64>, label: usize, loss: LossKind) -> Result<Array3<f64>>;

    /// Argmax label, ties broken toward the lowest index.
    fn predict_label(&self, x: &Array3<f64>) -> Result<usize> {
        let logits = self.logits(x)?;
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }

    fn check_input(&self, x: &Array3<f64>) -> Result<()> {
        let shape = self.input_shape();
        if x.shape() != shape {
            return Err(Error::Shape(format!(
                "image shape {:?} does not match classifier shape {:?}",
                x.shape(),
                shape
            )));
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_classes() {
            return Err(Error::Parameter(format!(
                "label {label} out of range for {} classes",
                self.num_classes()
            )));
        }
        Ok(())
    }
}

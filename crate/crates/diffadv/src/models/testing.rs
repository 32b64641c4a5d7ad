//! Deterministic stub models for tests, oracles, and randomized property
//! suites. These are intentionally simple: closed-form Jacobians make them
//! usable as ground truth.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diffusion::{ConditionEmbedding, EmbeddingKind};
use crate::error::{Error, Result};
use crate::models::traits::{Classifier, LossKind, NoisePredictor};

/// Predictor that always returns zeros.
pub struct ZeroPredictor {
    shape: [usize; 3],
    edim: usize,
}

impl ZeroPredictor {
    pub fn new(shape: [usize; 3], edim: usize) -> Self {
        Self { shape, edim }
    }
}

impl NoisePredictor for ZeroPredictor {
    fn latent_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn embedding_dim(&self) -> usize {
        self.edim
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn concurrent_safe(&self) -> bool {
        true
    }

    fn predict(&self, z: &Array3<f64>, _t: usize, _e: &ConditionEmbedding) -> Result<Array3<f64>> {
        self.check_latent(z)?;
        Ok(Array3::zeros(z.raw_dim()))
    }

    fn embed_vjp(
        &self,
        z: &Array3<f64>,
        _t: usize,
        _e: &ConditionEmbedding,
        _cotangent: &Array3<f64>,
    ) -> Result<Array1<f64>> {
        self.check_latent(z)?;
        Ok(Array1::zeros(self.edim))
    }

    fn embed_prompt(&self, prompt: &str) -> ConditionEmbedding {
        let kind = if prompt.is_empty() { EmbeddingKind::Null } else { EmbeddingKind::Text };
        ConditionEmbedding { values: Array1::zeros(self.edim), kind }
    }
}

/// Predictor returning fixed arrays per embedding kind, ignoring `z` and `t`.
pub struct ConstPredictor {
    cond_out: Array3<f64>,
    null_out: Array3<f64>,
    edim: usize,
}

impl ConstPredictor {
    pub fn with_values(cond_out: Array3<f64>, null_out: Array3<f64>, edim: usize) -> Self {
        assert_eq!(cond_out.shape(), null_out.shape());
        Self { cond_out, null_out, edim }
    }
}

impl NoisePredictor for ConstPredictor {
    fn latent_shape(&self) -> [usize; 3] {
        let s = self.cond_out.shape();
        [s[0], s[1], s[2]]
    }

    fn embedding_dim(&self) -> usize {
        self.edim
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn concurrent_safe(&self) -> bool {
        true
    }

    fn predict(&self, z: &Array3<f64>, _t: usize, e: &ConditionEmbedding) -> Result<Array3<f64>> {
        self.check_latent(z)?;
        Ok(match e.kind {
            EmbeddingKind::Text => self.cond_out.clone(),
            EmbeddingKind::Null => self.null_out.clone(),
        })
    }

    fn embed_vjp(
        &self,
        z: &Array3<f64>,
        _t: usize,
        _e: &ConditionEmbedding,
        _cotangent: &Array3<f64>,
    ) -> Result<Array1<f64>> {
        self.check_latent(z)?;
        Ok(Array1::zeros(self.edim))
    }

    fn embed_prompt(&self, prompt: &str) -> ConditionEmbedding {
        let kind = if prompt.is_empty() { EmbeddingKind::Null } else { EmbeddingKind::Text };
        ConditionEmbedding { values: Array1::zeros(self.edim), kind }
    }
}

/// Seeded affine predictor:
/// `eps(z, t, e) = gain ⊙ z + bias + reshape(P e) + t_scale * t/1000`.
///
/// The Jacobian with respect to `z` is the diagonal `gain`, and with respect
/// to `e` the fixed matrix `P`, so every gradient has a closed form.
pub struct AffinePredictor {
    shape: [usize; 3],
    gain: Array3<f64>,
    bias: Array3<f64>,
    embed_map: Array2<f64>,
    t_scale: f64,
}

impl AffinePredictor {
    pub fn seeded(shape: [usize; 3], edim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape[0] * shape[1] * shape[2];
        let sample3 = |scale: f64, rng: &mut ChaCha8Rng| {
            Array3::from_shape_fn(
                (shape[0], shape[1], shape[2]),
                |_| {
                    let v: f64 = rng.sample(StandardNormal);
                    v * scale
                },
            )
        };
        let gain = sample3(0.1, &mut rng);
        let bias = sample3(0.2, &mut rng);
        let embed_map = Array2::from_shape_fn((n, edim), |_| {
            let v: f64 = rng.sample(StandardNormal);
            v * 0.3
        });
        Self { shape, gain, bias, embed_map, t_scale: 0.05 }
    }

    pub fn embed_matrix(&self) -> &Array2<f64> {
        &self.embed_map
    }
}

impl NoisePredictor for AffinePredictor {
    fn latent_shape(&self) -> [usize; 3] {
        self.shape
    }

    fn embedding_dim(&self) -> usize {
        self.embed_map.shape()[1]
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn concurrent_safe(&self) -> bool {
        true
    }

    fn predict(&self, z: &Array3<f64>, t: usize, e: &ConditionEmbedding) -> Result<Array3<f64>> {
        self.check_latent(z)?;
        if e.values.len() != self.embedding_dim() {
            return Err(Error::Shape(format!(
                "embedding length {} does not match declared {}",
                e.values.len(),
                self.embedding_dim()
            )));
        }
        let projected = self.embed_map.dot(&e.values);
        let mut out = &self.gain * z + &self.bias + self.t_scale * (t as f64 / 1000.0);
        for (slot, &v) in out.iter_mut().zip(projected.iter()) {
            *slot += v;
        }
        Ok(out)
    }

    fn embed_vjp(
        &self,
        z: &Array3<f64>,
        _t: usize,
        _e: &ConditionEmbedding,
        cotangent: &Array3<f64>,
    ) -> Result<Array1<f64>> {
        self.check_latent(z)?;
        let flat = Array1::from_iter(cotangent.iter().copied());
        Ok(self.embed_map.t().dot(&flat))
    }

    fn embed_prompt(&self, prompt: &str) -> ConditionEmbedding {
        let kind = if prompt.is_empty() { EmbeddingKind::Null } else { EmbeddingKind::Text };
        let mut rng = ChaCha8Rng::seed_from_u64(prompt.len() as u64);
        let values = Array1::from_shape_fn(self.embedding_dim(), |_| {
            let v: f64 = rng.sample(StandardNormal);
            v * 0.1
        });
        ConditionEmbedding { values, kind }
    }
}

/// Linear-softmax classifier over flattened pixels with closed-form input
/// gradients: `grad = W^T (softmax(W x + b) - onehot(y))`.
pub struct LinearSoftmaxClassifier {
    weights: Array2<f64>,
    bias: Array1<f64>,
    input_shape: [usize; 3],
}

impl LinearSoftmaxClassifier {
    pub fn seeded(input_shape: [usize; 3], classes: usize, seed: u64) -> Self {
        let n = input_shape[0] * input_shape[1] * input_shape[2];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Array2::from_shape_fn((classes, n), |_| {
            let v: f64 = rng.sample(StandardNormal);
            v * 0.2
        });
        let bias = Array1::from_shape_fn(classes, |_| {
            let v: f64 = rng.sample(StandardNormal);
            v * 0.05
        });
        Self { weights, bias, input_shape }
    }

    fn flat(&self, x: &Array3<f64>) -> Array1<f64> {
        Array1::from_iter(x.iter().copied())
    }
}

impl Classifier for LinearSoftmaxClassifier {
    fn num_classes(&self) -> usize {
        self.weights.shape()[0]
    }

    fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn concurrent_safe(&self) -> bool {
        true
    }

    fn logits(&self, x: &Array3<f64>) -> Result<Array1<f64>> {
        self.check_input(x)?;
        Ok(self.weights.dot(&self.flat(x)) + &self.bias)
    }

    fn input_gradient(&self, x: &Array3<f64>, label: usize, loss: LossKind) -> Result<Array3<f64>> {
        self.check_input(x)?;
        self.check_label(label)?;
        let LossKind::CrossEntropy = loss;
        let logits = self.logits(x)?;
        let probs = crate::models::nn::softmax(&logits);
        let mut residual = probs;
        residual[label] -= 1.0;
        let flat_grad = self.weights.t().dot(&residual);
        let [c, h, w] = self.input_shape;
        Ok(Array3::from_shape_vec((c, h, w), flat_grad.to_vec())
            .expect("gradient reshapes to input shape"))
    }
}

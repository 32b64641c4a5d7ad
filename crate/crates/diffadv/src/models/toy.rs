//! Desk-scale trainable models: a small convolutional noise predictor with a
//! latent-shaped embedding pathway, plus two classifier architectures (one
//! convolutional, one patch-attention) so transfer can be measured across an
//! architecture gap.
//!
//! All backward passes are written by hand and pinned against finite
//! differences in the test suites.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::diffusion::{ConditionEmbedding, EmbeddingKind};
use crate::error::{Error, Result};
use crate::models::nn;
use crate::models::traits::{Classifier, LossKind, NoisePredictor};

/// Deterministic seed derived from a prompt string.
pub fn prompt_seed(prompt: &str) -> u64 {
    let digest = Sha256::digest(prompt.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 8+ bytes"))
}

/// Unit-normalized seeded Gaussian vector scaled to `norm`.
fn seeded_vector(dim: usize, seed: u64, norm: f64) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal));
    let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if len > 0.0 {
        v *= norm / len;
    }
    v
}

// ---------------------------------------------------------------------------
// Noise predictor
// ---------------------------------------------------------------------------

/// Small conv noise predictor:
///
/// `eps(z, t, e) = conv2(tanh(conv1(z) + W_t phi(t))) + gain * reshape(e)`
///
/// Embeddings are latent-shaped (length `3 * side^2`), so the embedding
/// pathway is a diagonal map: its Jacobian is `gain * I`. The gain is
/// calibrated so per-step null-embedding regression is well conditioned at
/// the default inner step size.
#[derive(Debug, Clone)]
pub struct ToyPredictor {
    pub(crate) side: usize,
    pub(crate) hidden: usize,
    pub(crate) time_dim: usize,
    pub(crate) total_train_steps: usize,
    pub(crate) embed_gain: f64,
    pub(crate) embed_scale: f64,
    pub(crate) conv1_w: Array4<f64>,
    pub(crate) conv1_b: Array1<f64>,
    pub(crate) time_w: Array2<f64>,
    pub(crate) conv2_w: Array4<f64>,
    pub(crate) conv2_b: Array1<f64>,
    /// Learned embeddings keyed by prompt string; includes the null text "".
    pub(crate) embed_table: BTreeMap<String, Array1<f64>>,
}

/// Default embedding-pathway gain.
pub const DEFAULT_EMBED_GAIN: f64 = 200.0;
/// Norm of hash-derived (untrained) prompt embeddings.
pub const DEFAULT_EMBED_SCALE: f64 = 0.005;

impl ToyPredictor {
    /// Freshly initialized predictor with seeded weights.
    pub fn new(side: usize, hidden: usize, total_train_steps: usize, seed: u64) -> Self {
        let time_dim = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let randn = |scale: f64, rng: &mut ChaCha8Rng| -> f64 {
            let v: f64 = rng.sample(StandardNormal);
            v * scale
        };
        let conv1_w = Array4::from_shape_fn((hidden, 3, 3, 3), |_| randn(0.15, &mut rng));
        let conv1_b = Array1::zeros(hidden);
        let time_w = Array2::from_shape_fn((hidden, time_dim), |_| randn(0.1, &mut rng));
        let conv2_w = Array4::from_shape_fn((3, hidden, 3, 3), |_| randn(0.1, &mut rng));
        let conv2_b = Array1::zeros(3);
        Self {
            side,
            hidden,
            time_dim,
            total_train_steps,
            embed_gain: DEFAULT_EMBED_GAIN,
            embed_scale: DEFAULT_EMBED_SCALE,
            conv1_w,
            conv1_b,
            time_w,
            conv2_w,
            conv2_b,
            embed_table: BTreeMap::new(),
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn total_train_steps(&self) -> usize {
        self.total_train_steps
    }

    pub fn embed_table(&self) -> &BTreeMap<String, Array1<f64>> {
        &self.embed_table
    }

    /// Ensure a prompt has a (trainable) table entry; returns its key.
    pub(crate) fn intern_prompt(&mut self, prompt: &str) {
        let dim = self.embedding_dim();
        let scale = self.embed_scale;
        self.embed_table
            .entry(prompt.to_string())
            .or_insert_with(|| seeded_vector(dim, prompt_seed(prompt), scale));
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.total_train_steps {
            return Err(Error::Parameter(format!(
                "train timestep {t} outside horizon {}",
                self.total_train_steps
            )));
        }
        Ok(())
    }

    fn check_embedding(&self, e: &ConditionEmbedding) -> Result<()> {
        if e.values.len() != self.embedding_dim() {
            return Err(Error::Shape(format!(
                "embedding length {} does not match declared {}",
                e.values.len(),
                self.embedding_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass keeping the hidden activation for reuse in backprop.
    fn forward_parts(&self, z: &Array3<f64>, t: usize) -> (Array3<f64>, Array3<f64>) {
        let tf = nn::time_features(t, self.total_train_steps, self.time_dim);
        let tproj = self.time_w.dot(&tf);
        let mut pre = nn::conv3x3(z, &self.conv1_w, &self.conv1_b);
        for (k, mut plane) in pre.outer_iter_mut().enumerate() {
            plane += tproj[k];
        }
        let h = nn::tanh3(&pre);
        let base = nn::conv3x3(&h, &self.conv2_w, &self.conv2_b);
        (h, base)
    }

    fn embed_as_latent(&self, e: &ConditionEmbedding) -> Array3<f64> {
        Array3::from_shape_vec((3, self.side, self.side), e.values.to_vec())
            .expect("embedding length matches latent size")
    }

    /// Vector-Jacobian product with respect to the latent input `z`.
    ///
    /// The embedding pathway does not depend on `z`, so this is backprop
    /// through the two convolutions and the tanh.
    pub fn input_vjp(
        &self,
        z: &Array3<f64>,
        t: usize,
        _e: &ConditionEmbedding,
        cotangent: &Array3<f64>,
    ) -> Result<Array3<f64>> {
        self.check_latent(z)?;
        self.check_t(t)?;
        let (h, _) = self.forward_parts(z, t);
        let g_h = nn::conv3x3_grad_input(cotangent, &self.conv2_w);
        let g_pre = nn::tanh3_backward(&g_h, &h);
        Ok(nn::conv3x3_grad_input(&g_pre, &self.conv1_w))
    }

    /// Gradients of `<cotangent, eps(z,t,e)>` with respect to all weights
    /// and the embedding. Used by the fitting loop.
    pub(crate) fn weight_grads(
        &self,
        z: &Array3<f64>,
        t: usize,
        cotangent: &Array3<f64>,
    ) -> PredictorGrads {
        let tf = nn::time_features(t, self.total_train_steps, self.time_dim);
        let (h, _) = self.forward_parts(z, t);
        let (g_conv2_w, g_conv2_b) = nn::conv3x3_grad_params(cotangent, &h);
        let g_h = nn::conv3x3_grad_input(cotangent, &self.conv2_w);
        let g_pre = nn::tanh3_backward(&g_h, &h);
        let (g_conv1_w, g_conv1_b) = nn::conv3x3_grad_params(&g_pre, z);
        // Time projection is a per-channel bias: channel sums times features.
        let mut g_time_w = Array2::zeros((self.hidden, self.time_dim));
        for k in 0..self.hidden {
            let channel_sum: f64 = g_pre.index_axis(ndarray::Axis(0), k).sum();
            for j in 0..self.time_dim {
                g_time_w[[k, j]] += channel_sum * tf[j];
            }
        }
        let g_embed = Array1::from_iter(cotangent.iter().map(|&g| g * self.embed_gain));
        PredictorGrads { g_conv1_w, g_conv1_b, g_time_w, g_conv2_w, g_conv2_b, g_embed }
    }
}

pub(crate) struct PredictorGrads {
    pub g_conv1_w: Array4<f64>,
    pub g_conv1_b: Array1<f64>,
    pub g_time_w: Array2<f64>,
    pub g_conv2_w: Array4<f64>,
    pub g_conv2_b: Array1<f64>,
    pub g_embed: Array1<f64>,
}

impl NoisePredictor for ToyPredictor {
    fn latent_shape(&self) -> [usize; 3] {
        [3, self.side, self.side]
    }

    fn embedding_dim(&self) -> usize {
        3 * self.side * self.side
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn concurrent_safe(&self) -> bool {
        true
    }

    fn predict(&self, z: &Array3<f64>, t: usize, e: &ConditionEmbedding) -> Result<Array3<f64>> {
        self.check_latent(z)?;
        self.check_t(t)?;
        self.check_embedding(e)?;
        let (_, base) = self.forward_parts(z, t);
        Ok(base + self.embed_as_latent(e) * self.embed_gain)
    }

    fn embed_vjp(
        &self,
        z: &Array3<f64>,
        t: usize,
        e: &ConditionEmbedding,
        cotangent: &Array3<f64>,
    ) -> Result<Array1<f64>> {
        self.check_latent(z)?;
        self.check_t(t)?;
        self.check_embedding(e)?;
        if cotangent.shape() != z.shape() {
            return Err(Error::Shape("cotangent must match latent shape".into()));
        }
        Ok(Array1::from_iter(cotangent.iter().map(|&g| g * self.embed_gain)))
    }

    fn embed_prompt(&self, prompt: &str) -> ConditionEmbedding {
        let kind = if prompt.is_empty() { EmbeddingKind::Null } else { EmbeddingKind::Text };
        let values = match self.embed_table.get(prompt) {
            Some(v) => v.clone(),
            None => seeded_vector(self.embedding_dim(), prompt_seed(prompt), self.embed_scale),
        };
        ConditionEmbedding { values, kind }
    }
}

// ---------------------------------------------------------------------------
// Convolutional classifier
// ---------------------------------------------------------------------------

/// Two conv layers with tanh, global average pooling, and a linear head.
#[derive(Debug, Clone)]
pub struct ConvClassifier {
    pub(crate) side: usize,
    pub(crate) hidden: usize,
    pub(crate) classes: usize,
    pub(crate) conv1_w: Array4<f64>,
    pub(crate) conv1_b: Array1<f64>,
    pub(crate) conv2_w: Array4<f64>,
    pub(crate) conv2_b: Array1<f64>,
    pub(crate) fc_w: Array2<f64>,
    pub(crate) fc_b: Array1<f64>,
}

impl ConvClassifier {
    pub fn new(side: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let randn = |scale: f64, rng: &mut ChaCha8Rng| -> f64 {
            let v: f64 = rng.sample(StandardNormal);
            v * scale
        };
        Self {
            side,
            hidden,
            classes,
            conv1_w: Array4::from_shape_fn((hidden, 3, 3, 3), |_| randn(0.25, &mut rng)),
            conv1_b: Array1::zeros(hidden),
            conv2_w: Array4::from_shape_fn((hidden, hidden, 3, 3), |_| randn(0.15, &mut rng)),
            conv2_b: Array1::zeros(hidden),
            fc_w: Array2::from_shape_fn((classes, hidden), |_| randn(0.3, &mut rng)),
            fc_b: Array1::zeros(classes),
        }
    }

    fn forward_parts(&self, x: &Array3<f64>) -> ConvParts {
        let h1 = nn::tanh3(&nn::conv3x3(x, &self.conv1_w, &self.conv1_b));
        let h2 = nn::tanh3(&nn::conv3x3(&h1, &self.conv2_w, &self.conv2_b));
        let area = (self.side * self.side) as f64;
        let pooled = Array1::from_shape_fn(self.hidden, |k| {
            h2.index_axis(ndarray::Axis(0), k).sum() / area
        });
        let logits = self.fc_w.dot(&pooled) + &self.fc_b;
        ConvParts { h1, h2, pooled, logits }
    }

    /// Backprop from a logit cotangent to the input image.
    fn backward_input(&self, parts: &ConvParts, g_logits: &Array1<f64>) -> Array3<f64> {
        let area = (self.side * self.side) as f64;
        let g_pooled = self.fc_w.t().dot(g_logits);
        let mut g_h2 = Array3::zeros(parts.h2.raw_dim());
        for (k, mut plane) in g_h2.outer_iter_mut().enumerate() {
            plane.fill(g_pooled[k] / area);
        }
        let g_pre2 = nn::tanh3_backward(&g_h2, &parts.h2);
        let g_h1 = nn::conv3x3_grad_input(&g_pre2, &self.conv2_w);
        let g_pre1 = nn::tanh3_backward(&g_h1, &parts.h1);
        nn::conv3x3_grad_input(&g_pre1, &self.conv1_w)
    }

    /// Gradients of the cross-entropy loss with respect to all weights.
    pub(crate) fn weight_grads(&self, x: &Array3<f64>, label: usize) -> ConvClassifierGrads {
        let parts = self.forward_parts(x);
        let g_logits = nn::cross_entropy_grad(&parts.logits, label);
        let area = (self.side * self.side) as f64;
        let g_fc_w = {
            let mut g = Array2::zeros((self.classes, self.hidden));
            for c in 0..self.classes {
                for k in 0..self.hidden {
                    g[[c, k]] = g_logits[c] * parts.pooled[k];
                }
            }
            g
        };
        let g_fc_b = g_logits.clone();
        let g_pooled = self.fc_w.t().dot(&g_logits);
        let mut g_h2 = Array3::zeros(parts.h2.raw_dim());
        for (k, mut plane) in g_h2.outer_iter_mut().enumerate() {
            plane.fill(g_pooled[k] / area);
        }
        let g_pre2 = nn::tanh3_backward(&g_h2, &parts.h2);
        let (g_conv2_w, g_conv2_b) = nn::conv3x3_grad_params(&g_pre2, &parts.h1);
        let g_h1 = nn::conv3x3_grad_input(&g_pre2, &self.conv2_w);
        let g_pre1 = nn::tanh3_backward(&g_h1, &parts.h1);
        let (g_conv1_w, g_conv1_b) = nn::conv3x3_grad_params(&g_pre1, x);
        ConvClassifierGrads { g_conv1_w, g_conv1_b, g_conv2_w, g_conv2_b, g_fc_w, g_fc_b }
    }
}

struct ConvParts {
    h1: Array3<f64>,
    h2: Array3<f64>,
    pooled: Array1<f64>,
    logits: Array1<f64>,
}

pub(crate) struct ConvClassifierGrads {
    pub g_conv1_w: Array4<f64>,
    pub g_conv1_b: Array1<f64>,
    pub g_conv2_w: Array4<f64>,
    pub g_conv2_b: Array1<f64>,
    pub g_fc_w: Array2<f64>,
    pub g_fc_b: Array1<f64>,
}

impl Classifier for ConvClassifier {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn input_shape(&self) -> [usize; 3] {
        [3, self.side, self.side]
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn concurrent_safe(&self) -> bool {
        true
    }

    fn logits(&self, x: &Array3<f64>) -> Result<Array1<f64>> {
        self.check_input(x)?;
        Ok(self.forward_parts(x).logits)
    }

    fn input_gradient(&self, x: &Array3<f64>, label: usize, loss: LossKind) -> Result<Array3<f64>> {
        self.check_input(x)?;
        self.check_label(label)?;
        let LossKind::CrossEntropy = loss;
        let parts = self.forward_parts(x);
        let g_logits = nn::cross_entropy_grad(&parts.logits, label);
        Ok(self.backward_input(&parts, &g_logits))
    }
}

// ---------------------------------------------------------------------------
// Patch-attention classifier
// ---------------------------------------------------------------------------

/// Patch embedding, one self-attention mix (identity values), tanh, mean
/// pooling, linear head. Deliberately a different inductive bias from the
/// conv classifier.
#[derive(Debug, Clone)]
pub struct PatchAttnClassifier {
    pub(crate) side: usize,
    pub(crate) patch: usize,
    pub(crate) dmodel: usize,
    pub(crate) classes: usize,
    pub(crate) w_embed: Array2<f64>,
    pub(crate) b_embed: Array1<f64>,
    pub(crate) w_out: Array2<f64>,
    pub(crate) b_out: Array1<f64>,
}

impl PatchAttnClassifier {
    pub fn new(side: usize, patch: usize, dmodel: usize, classes: usize, seed: u64) -> Self {
        assert!(side % patch == 0, "patch size must divide image side");
        let din = 3 * patch * patch;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let randn = |scale: f64, rng: &mut ChaCha8Rng| -> f64 {
            let v: f64 = rng.sample(StandardNormal);
            v * scale
        };
        Self {
            side,
            patch,
            dmodel,
            classes,
            w_embed: Array2::from_shape_fn((dmodel, din), |_| randn(0.2, &mut rng)),
            b_embed: Array1::zeros(dmodel),
            w_out: Array2::from_shape_fn((classes, dmodel), |_| randn(0.3, &mut rng)),
            b_out: Array1::zeros(classes),
        }
    }

    fn grid(&self) -> usize {
        self.side / self.patch
    }

    fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    /// Extract patches as rows of `[tokens, patch_dim]`.
    fn patches(&self, x: &Array3<f64>) -> Array2<f64> {
        let g = self.grid();
        let p = self.patch;
        let mut out = Array2::zeros((self.tokens(), self.patch_dim()));
        for gy in 0..g {
            for gx in 0..g {
                let tok = gy * g + gx;
                for c in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            let d = c * p * p + py * p + px;
                            out[[tok, d]] = x[[c, gy * p + py, gx * p + px]];
                        }
                    }
                }
            }
        }
        out
    }

    /// Scatter patch-space gradients back to image space.
    fn unpatch(&self, g_patches: &Array2<f64>) -> Array3<f64> {
        let g = self.grid();
        let p = self.patch;
        let mut out = Array3::zeros((3, self.side, self.side));
        for gy in 0..g {
            for gx in 0..g {
                let tok = gy * g + gx;
                for c in 0..3 {
                    for py in 0..p {
                        for px in 0..p {
                            let d = c * p * p + py * p + px;
                            out[[c, gy * p + py, gx * p + px]] = g_patches[[tok, d]];
                        }
                    }
                }
            }
        }
        out
    }

    fn forward_parts(&self, x: &Array3<f64>) -> AttnParts {
        let patches = self.patches(x);
        // Tokens U = patches W^T + b.
        let tokens = patches.dot(&self.w_embed.t()) + &self.b_embed;
        let scale = 1.0 / (self.dmodel as f64).sqrt();
        let scores = tokens.dot(&tokens.t()) * scale;
        let mut attn = scores.clone();
        for mut row in attn.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let mixed = attn.dot(&tokens);
        let act = mixed.mapv(f64::tanh);
        let n = self.tokens() as f64;
        let pooled = Array1::from_shape_fn(self.dmodel, |d| act.column(d).sum() / n);
        let logits = self.w_out.dot(&pooled) + &self.b_out;
        AttnParts { patches, tokens, attn, mixed, act, pooled, logits }
    }

    /// Backprop from a logit cotangent to token space; shared by the input
    /// gradient and the weight gradients.
    fn backward_tokens(&self, parts: &AttnParts, g_logits: &Array1<f64>) -> Array2<f64> {
        let n = self.tokens();
        let nf = n as f64;
        let scale = 1.0 / (self.dmodel as f64).sqrt();
        let g_pooled = self.w_out.t().dot(g_logits);
        // act -> mixed
        let mut g_act = Array2::zeros(parts.act.raw_dim());
        for mut row in g_act.rows_mut() {
            row.assign(&(&g_pooled / nf));
        }
        let mut g_mixed = g_act;
        g_mixed.zip_mut_with(&parts.act, |g, &y| *g *= 1.0 - y * y);
        // mixed = attn · tokens
        let g_attn = g_mixed.dot(&parts.tokens.t());
        let g_tokens_value = parts.attn.t().dot(&g_mixed);
        // softmax rows backward
        let mut g_scores = Array2::zeros((n, n));
        for i in 0..n {
            let a_row = parts.attn.row(i);
            let g_row = g_attn.row(i);
            let dot: f64 = a_row.iter().zip(g_row.iter()).map(|(a, g)| a * g).sum();
            for j in 0..n {
                g_scores[[i, j]] = a_row[j] * (g_row[j] - dot);
            }
        }
        // scores = tokens tokens^T * scale
        let g_tokens_query = (&g_scores + &g_scores.t()).dot(&parts.tokens) * scale;
        g_tokens_value + g_tokens_query
    }

    /// Gradients of the cross-entropy loss with respect to all weights.
    pub(crate) fn weight_grads(&self, x: &Array3<f64>, label: usize) -> AttnClassifierGrads {
        let parts = self.forward_parts(x);
        let g_logits = nn::cross_entropy_grad(&parts.logits, label);
        let g_w_out = {
            let mut g = Array2::zeros((self.classes, self.dmodel));
            for c in 0..self.classes {
                for d in 0..self.dmodel {
                    g[[c, d]] = g_logits[c] * parts.pooled[d];
                }
            }
            g
        };
        let g_b_out = g_logits.clone();
        let g_tokens = self.backward_tokens(&parts, &g_logits);
        let g_w_embed = g_tokens.t().dot(&parts.patches);
        let g_b_embed = Array1::from_shape_fn(self.dmodel, |d| g_tokens.column(d).sum());
        AttnClassifierGrads { g_w_embed, g_b_embed, g_w_out, g_b_out }
    }
}

struct AttnParts {
    patches: Array2<f64>,
    tokens: Array2<f64>,
    attn: Array2<f64>,
    #[allow(dead_code)]
    mixed: Array2<f64>,
    act: Array2<f64>,
    pooled: Array1<f64>,
    logits: Array1<f64>,
}

pub(crate) struct AttnClassifierGrads {
    pub g_w_embed: Array2<f64>,
    pub g_b_embed: Array1<f64>,
    pub g_w_out: Array2<f64>,
    pub g_b_out: Array1<f64>,
}

impl Classifier for PatchAttnClassifier {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn input_shape(&self) -> [usize; 3] {
        [3, self.side, self.side]
    }

    fn differentiable(&self) -> bool {
        true
    }

    fn concurrent_safe(&self) -> bool {
        true
    }

    fn logits(&self, x: &Array3<f64>) -> Result<Array1<f64>> {
        self.check_input(x)?;
        Ok(self.forward_parts(x).logits)
    }

    fn input_gradient(&self, x: &Array3<f64>, label: usize, loss: LossKind) -> Result<Array3<f64>> {
        self.check_input(x)?;
        self.check_label(label)?;
        let LossKind::CrossEntropy = loss;
        let parts = self.forward_parts(x);
        let g_logits = nn::cross_entropy_grad(&parts.logits, label);
        let g_tokens = self.backward_tokens(&parts, &g_logits);
        let g_patches = g_tokens.dot(&self.w_embed);
        Ok(self.unpatch(&g_patches))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_error};
    use crate::models::nn::cross_entropy;

    fn rand_image(side: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, side, side), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn predictor_is_deterministic_and_shape_stable() {
        let p = ToyPredictor::new(8, 6, 1000, 3);
        let z = rand_image(8, 1);
        let e = p.embed_prompt("a bright disk");
        let a = p.predict(&z, 500, &e).unwrap();
        let b = p.predict(&z, 500, &e).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), z.shape());
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn predictor_rejects_bad_inputs() {
        let p = ToyPredictor::new(8, 6, 1000, 3);
        let e = p.embed_prompt("x");
        assert!(p.predict(&rand_image(4, 1), 10, &e).is_err());
        assert!(p.predict(&rand_image(8, 1), 1000, &e).is_err());
        let bad = ConditionEmbedding::text(Array1::zeros(7));
        assert!(p.predict(&rand_image(8, 1), 10, &bad).is_err());
    }

    #[test]
    fn predictor_embedding_vjp_matches_finite_differences() {
        let p = ToyPredictor::new(4, 4, 1000, 9);
        let z = rand_image(4, 2);
        let e = p.embed_prompt("vertical stripes");
        let cot = rand_image(4, 3);
        let analytic = p.embed_vjp(&z, 123, &e, &cot).unwrap();
        // Check a random subset of coordinates; the map is diagonal.
        let f = |vals: &[f64]| {
            let emb = ConditionEmbedding::text(Array1::from_vec(vals.to_vec()));
            let out = p.predict(&z, 123, &emb).unwrap();
            out.iter().zip(cot.iter()).map(|(o, c)| o * c).sum::<f64>()
        };
        let fd = finite_diff_grad(f, e.values.as_slice().unwrap(), 1e-6);
        assert!(max_rel_error(analytic.as_slice().unwrap(), &fd) < 1e-5);
    }

    #[test]
    fn predictor_input_vjp_matches_finite_differences() {
        let p = ToyPredictor::new(4, 4, 1000, 11);
        let z = rand_image(4, 5);
        let e = p.embed_prompt("a checkerboard");
        let cot = rand_image(4, 6);
        let analytic = p.input_vjp(&z, 777, &e, &cot).unwrap();
        let f = |vals: &[f64]| {
            let zz = Array3::from_shape_vec((3, 4, 4), vals.to_vec()).unwrap();
            let out = p.predict(&zz, 777, &e).unwrap();
            out.iter().zip(cot.iter()).map(|(o, c)| o * c).sum::<f64>()
        };
        let fd = finite_diff_grad(f, z.as_slice().unwrap(), 1e-6);
        assert!(max_rel_error(analytic.as_slice().unwrap(), &fd) < 1e-5);
    }

    #[test]
    fn predictor_weight_grads_match_finite_differences() {
        let p = ToyPredictor::new(4, 3, 1000, 13);
        let z = rand_image(4, 7);
        let cot = rand_image(4, 8);
        let grads = p.weight_grads(&z, 321, &cot);
        let e_fixed = ConditionEmbedding::text(Array1::zeros(p.embedding_dim()));
        let objective = |p: &ToyPredictor| {
            let out = p.predict(&z, 321, &e_fixed).unwrap();
            out.iter().zip(cot.iter()).map(|(o, c)| o * c).sum::<f64>()
        };
        // conv1_w
        let base = p.conv1_w.clone();
        let fd = finite_diff_grad(
            |vals| {
                let mut q = p.clone();
                q.conv1_w = Array4::from_shape_vec(base.raw_dim(), vals.to_vec()).unwrap();
                objective(&q)
            },
            base.as_slice().unwrap(),
            1e-6,
        );
        assert!(max_rel_error(grads.g_conv1_w.as_slice().unwrap(), &fd) < 1e-5);
        // time_w
        let base_t = p.time_w.clone();
        let fd_t = finite_diff_grad(
            |vals| {
                let mut q = p.clone();
                q.time_w = Array2::from_shape_vec(base_t.raw_dim(), vals.to_vec()).unwrap();
                objective(&q)
            },
            base_t.as_slice().unwrap(),
            1e-6,
        );
        assert!(max_rel_error(grads.g_time_w.as_slice().unwrap(), &fd_t) < 1e-5);
        // conv2_b
        let base_b = p.conv2_b.clone();
        let fd_b = finite_diff_grad(
            |vals| {
                let mut q = p.clone();
                q.conv2_b = Array1::from_vec(vals.to_vec());
                objective(&q)
            },
            base_b.as_slice().unwrap(),
            1e-6,
        );
        assert!(max_rel_error(grads.g_conv2_b.as_slice().unwrap(), &fd_b) < 1e-5);
    }

    #[test]
    fn interned_prompts_become_table_entries() {
        let mut p = ToyPredictor::new(8, 6, 1000, 3);
        assert!(p.embed_table().is_empty());
        p.intern_prompt("horizontal stripes");
        p.intern_prompt("");
        assert_eq!(p.embed_table().len(), 2);
        // Table entry matches the hash-derived value until training moves it.
        let from_table = p.embed_prompt("horizontal stripes");
        let fresh = seeded_vector(p.embedding_dim(), prompt_seed("horizontal stripes"), p.embed_scale);
        assert_eq!(from_table.values, fresh);
    }

    #[test]
    fn prompt_embeddings_are_deterministic_and_kind_tagged() {
        let p = ToyPredictor::new(8, 6, 1000, 3);
        let a = p.embed_prompt("a bright disk");
        let b = p.embed_prompt("a bright disk");
        assert_eq!(a.values, b.values);
        assert_eq!(a.kind, EmbeddingKind::Text);
        assert_eq!(p.embed_prompt("").kind, EmbeddingKind::Null);
        assert_ne!(p.embed_prompt("x").values, p.embed_prompt("y").values);
    }

    #[test]
    fn conv_classifier_gradient_matches_finite_differences() {
        let c = ConvClassifier::new(8, 5, 4, 21);
        let x = rand_image(8, 9);
        let grad = c.input_gradient(&x, 2, LossKind::CrossEntropy).unwrap();
        let fd = finite_diff_grad(
            |vals| {
                let xx = Array3::from_shape_vec((3, 8, 8), vals.to_vec()).unwrap();
                cross_entropy(&c.logits(&xx).unwrap(), 2)
            },
            x.as_slice().unwrap(),
            1e-6,
        );
        assert!(max_rel_error(grad.as_slice().unwrap(), &fd) < 1e-4);
    }

    #[test]
    fn conv_classifier_weight_grads_match_finite_differences() {
        let c = ConvClassifier::new(6, 4, 4, 23);
        let x = rand_image(6, 10);
        let grads = c.weight_grads(&x, 1);
        let base = c.conv2_w.clone();
        let fd = finite_diff_grad(
            |vals| {
                let mut q = c.clone();
                q.conv2_w = Array4::from_shape_vec(base.raw_dim(), vals.to_vec()).unwrap();
                cross_entropy(&q.logits(&x).unwrap(), 1)
            },
            base.as_slice().unwrap(),
            1e-6,
        );
        assert!(max_rel_error(grads.g_conv2_w.as_slice().unwrap(), &fd) < 1e-4);
        let base_fc = c.fc_w.clone();
        let fd_fc = finite_diff_grad(
            |vals| {
                let mut q = c.clone();
                q.fc_w = Array2::from_shape_vec(base_fc.raw_dim(), vals.to_vec()).unwrap();
                cross_entropy(&q.logits(&x).unwrap(), 1)
            },
            base_fc.as_slice().unwrap(),
            1e-6,
        );
        assert!(max_rel_error(grads.g_fc_w.as_slice().unwrap(), &fd_fc) < 1e-4);
    }

    #[test]
    fn attn_classifier_gradient_matches_finite_differences() {
        let c = PatchAttnClassifier::new(8, 4, 6, 4, 31);
        let x = rand_image(8, 11);
        let grad = c.input_gradient(&x, 3, LossKind::CrossEntropy).unwrap();
        let fd = finite_diff_grad(
            |vals| {
                let xx = Array3::from_shape_vec((3, 8, 8), vals.to_vec()).unwrap();
                cross_entropy(&c.logits(&xx).unwrap(), 3)
            },
            x.as_slice().unwrap(),
            1e-6,
        );
        assert!(max_rel_error(grad.as_slice().unwrap(), &fd) < 1e-4);
    }

    #[test]
    fn attn_classifier_weight_grads_match_finite_differences() {
        let c = PatchAttnClassifier::new(8, 4, 5, 4, 37);
        let x = rand_image(8, 12);
        let grads = c.weight_grads(&x, 0);
        let base = c.w_embed.clone();
        let fd = finite_diff_grad(
            |vals| {
                let mut q = c.clone();
                q.w_embed = Array2::from_shape_vec(base.raw_dim(), vals.to_vec()).unwrap();
                cross_entropy(&q.logits(&x).unwrap(), 0)
            },
            base.as_slice().unwrap(),
            1e-6,
        );
        assert!(max_rel_error(grads.g_w_embed.as_slice().unwrap(), &fd) < 1e-4);
        let base_out = c.w_out.clone();
        let fd_out = finite_diff_grad(
            |vals| {
                let mut q = c.clone();
                q.w_out = Array2::from_shape_vec(base_out.raw_dim(), vals.to_vec()).unwrap();
                cross_entropy(&q.logits(&x).unwrap(), 0)
            },
            base_out.as_slice().unwrap(),
            1e-6,
        );
        assert!(max_rel_error(grads.g_w_out.as_slice().unwrap(), &fd_out) < 1e-4);
    }

    #[test]
    fn classifier_logits_length_and_label_checks() {
        let c = ConvClassifier::new(8, 5, 4, 41);
        let x = rand_image(8, 13);
        assert_eq!(c.logits(&x).unwrap().len(), 4);
        assert!(c.input_gradient(&x, 4, LossKind::CrossEntropy).is_err());
        let a = PatchAttnClassifier::new(8, 4, 6, 4, 43);
        assert_eq!(a.logits(&x).unwrap().len(), 4);
        assert!(a.input_gradient(&x, 9, LossKind::CrossEntropy).is_err());
    }
}

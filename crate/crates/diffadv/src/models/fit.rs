//! Fitting procedures for the toy backend: classifier training, denoising
//! training for the noise predictor, and post-fit gradient verification.

use std::collections::BTreeMap;

use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse, ConditionEmbedding, DiffusionSchedule};
use crate::error::{Error, Result};

use crate::models::bundle::{AcceptanceThresholds, ToyBackendBundle};
use crate::models::dataset::{self, ToyDataset};
use crate::models::nn::{self, Adam, AdamParams};
use crate::models::toy::{ConvClassifier, PatchAttnClassifier, ToyPredictor};
use crate::models::traits::{Classifier, LossKind, NoisePredictor};

/// Hyperparameters of the bundled fitting procedure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitConfig {
    pub seed: u64,
    pub side: usize,
    pub per_class: usize,
    pub eval_count: usize,
    pub predictor_hidden: usize,
    pub predictor_batches: usize,
    pub predictor_batch_size: usize,
    pub predictor_lr: f64,
    pub classifier_hidden: usize,
    pub classifier_epochs: usize,
    pub classifier_batch_size: usize,
    pub classifier_lr: f64,
    pub noise_aug_sigma: f64,
    pub weight_decay: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            seed: 17,
            side: 16,
            per_class: 80,
            eval_count: 64,
            predictor_hidden: 12,
            predictor_batches: 1500,
            predictor_batch_size: 8,
            predictor_lr: 2e-3,
            classifier_hidden: 8,
            classifier_epochs: 25,
            classifier_batch_size: 8,
            classifier_lr: 3e-3,
            noise_aug_sigma: 0.03,
            weight_decay: 1e-4,
        }
    }
}

/// Quality metrics recorded while fitting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    /// Denoising MSE on the training split, measured with fresh noise draws
    /// after fitting finishes.
    pub training_floor_mse: f64,
    /// Denoising MSE on held-out images with fresh noise draws.
    pub heldout_mse: f64,
    /// Per-classifier accuracy on the training split.
    pub train_accuracy: BTreeMap<String, f64>,
    /// Per-classifier accuracy on the held-out split.
    pub eval_accuracy: BTreeMap<String, f64>,
    /// Largest relative error across all post-fit gradient probes.
    pub grad_check_max_rel_error: f64,
}

/// Fit the full toy backend on a dataset: two classifiers, the noise
/// predictor, post-fit gradient checks, and the frozen evaluation thresholds.
pub fn fit_bundle(dataset: ToyDataset, cfg: &FitConfig) -> Result<ToyBackendBundle> {
    if dataset.len() <= cfg.eval_count {
        return Err(Error::Parameter(format!(
            "dataset of {} images cannot spare {} for evaluation",
            dataset.len(),
            cfg.eval_count
        )));
    }
    let (train, eval) = dataset.split_eval(cfg.eval_count);

    let conv = fit_conv_classifier(&train, cfg)?;
    let attn = fit_attn_classifier(&train, cfg)?;
    let predictor = fit_predictor(&train, cfg)?;

    let mut train_accuracy = BTreeMap::new();
    let mut eval_accuracy = BTreeMap::new();
    train_accuracy.insert("toy-conv".to_string(), accuracy(&conv, &train)?);
    train_accuracy.insert("toy-attn".to_string(), accuracy(&attn, &train)?);
    eval_accuracy.insert("toy-conv".to_string(), accuracy(&conv, &eval)?);
    eval_accuracy.insert("toy-attn".to_string(), accuracy(&attn, &eval)?);

    let chance = 1.0 / dataset.num_classes as f64;
    for (name, &acc) in &eval_accuracy {
        if acc <= chance + 0.15 {
            return Err(Error::Fit(format!(
                "classifier {name} failed to clear chance on held-out data: \
                 accuracy {acc:.3} vs chance {chance:.3}"
            )));
        }
    }

    let (floor, heldout) = predictor_floors(&predictor, &train, &eval, cfg)?;
    let grad_err = post_fit_gradient_checks(&predictor, &conv, &attn, cfg.seed ^ 0x5eed)?;

    let report = FitReport {
        training_floor_mse: floor,
        heldout_mse: heldout,
        train_accuracy,
        eval_accuracy,
        grad_check_max_rel_error: grad_err,
    };

    Ok(ToyBackendBundle {
        predictor,
        conv_classifier: conv,
        attn_classifier: attn,
        dataset,
        eval_count: cfg.eval_count,
        seed: cfg.seed,
        fit_config: cfg.clone(),
        report,
        thresholds: AcceptanceThresholds::default(),
    })
}

/// Convenience: generate the procedural dataset, then fit.
pub fn fit_default_bundle(cfg: &FitConfig) -> Result<ToyBackendBundle> {
    let ds = dataset::generate(cfg.per_class, cfg.side, cfg.seed);
    fit_bundle(ds, cfg)
}

fn accuracy<C: Classifier>(classifier: &C, ds: &ToyDataset) -> Result<f64> {
    let mut hits = 0;
    for i in 0..ds.len() {
        if classifier.predict_label(&ds.images[i])? == ds.labels[i] {
            hits += 1;
        }
    }
    Ok(hits as f64 / ds.len() as f64)
}

fn randn3(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

fn noisy(x: &Array3<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> Array3<f64> {
    x + &(randn3(x.dim(), rng) * sigma)
}

fn fit_conv_classifier(train: &ToyDataset, cfg: &FitConfig) -> Result<ConvClassifier> {
    let mut c = ConvClassifier::new(cfg.side, cfg.classifier_hidden, train.num_classes, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(101));
    let hp = AdamParams { lr: cfg.classifier_lr, weight_decay: cfg.weight_decay, ..Default::default() };
    let hp_bias = AdamParams { lr: cfg.classifier_lr, ..Default::default() };
    let mut a_c1w = Adam::new(c.conv1_w.raw_dim());
    let mut a_c1b = Adam::new(c.conv1_b.raw_dim());
    let mut a_c2w = Adam::new(c.conv2_w.raw_dim());
    let mut a_c2b = Adam::new(c.conv2_b.raw_dim());
    let mut a_fcw = Adam::new(c.fc_w.raw_dim());
    let mut a_fcb = Adam::new(c.fc_b.raw_dim());
    let mut step = 0;
    for _epoch in 0..cfg.classifier_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(cfg.classifier_batch_size) {
            let mut g_c1w = ndarray::Array4::zeros(c.conv1_w.raw_dim());
            let mut g_c1b = Array1::zeros(c.conv1_b.raw_dim());
            let mut g_c2w = ndarray::Array4::zeros(c.conv2_w.raw_dim());
            let mut g_c2b = Array1::zeros(c.conv2_b.raw_dim());
            let mut g_fcw = ndarray::Array2::zeros(c.fc_w.raw_dim());
            let mut g_fcb = Array1::zeros(c.fc_b.raw_dim());
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let x = noisy(&train.images[i], cfg.noise_aug_sigma, &mut rng);
                let g = c.weight_grads(&x, train.labels[i]);
                g_c1w += &(g.g_conv1_w * scale);
                g_c1b += &(g.g_conv1_b * scale);
                g_c2w += &(g.g_conv2_w * scale);
                g_c2b += &(g.g_conv2_b * scale);
                g_fcw += &(g.g_fc_w * scale);
                g_fcb += &(g.g_fc_b * scale);
            }
            step += 1;
            a_c1w.step(&mut c.conv1_w, &g_c1w, &hp, step);
            a_c1b.step(&mut c.conv1_b, &g_c1b, &hp_bias, step);
            a_c2w.step(&mut c.conv2_w, &g_c2w, &hp, step);
            a_c2b.step(&mut c.conv2_b, &g_c2b, &hp_bias, step);
            a_fcw.step(&mut c.fc_w, &g_fcw, &hp, step);
            a_fcb.step(&mut c.fc_b, &g_fcb, &hp_bias, step);
        }
    }
    Ok(c)
}

fn fit_attn_classifier(train: &ToyDataset, cfg: &FitConfig) -> Result<PatchAttnClassifier> {
    let mut c = PatchAttnClassifier::new(cfg.side, 4, 12, train.num_classes, cfg.seed ^ 0xa77);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(202));
    let hp = AdamParams { lr: cfg.classifier_lr, weight_decay: cfg.weight_decay, ..Default::default() };
    let hp_bias = AdamParams { lr: cfg.classifier_lr, ..Default::default() };
    let mut a_we = Adam::new(c.w_embed.raw_dim());
    let mut a_be = Adam::new(c.b_embed.raw_dim());
    let mut a_wo = Adam::new(c.w_out.raw_dim());
    let mut a_bo = Adam::new(c.b_out.raw_dim());
    let mut step = 0;
    for _epoch in 0..cfg.classifier_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle(&mut order, &mut rng);
        for chunk in order.chunks(cfg.classifier_batch_size) {
            let mut g_we = ndarray::Array2::zeros(c.w_embed.raw_dim());
            let mut g_be = Array1::zeros(c.b_embed.raw_dim());
            let mut g_wo = ndarray::Array2::zeros(c.w_out.raw_dim());
            let mut g_bo = Array1::zeros(c.b_out.raw_dim());
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let x = noisy(&train.images[i], cfg.noise_aug_sigma, &mut rng);
                let g = c.weight_grads(&x, train.labels[i]);
                g_we += &(g.g_w_embed * scale);
                g_be += &(g.g_b_embed * scale);
                g_wo += &(g.g_w_out * scale);
                g_bo += &(g.g_b_out * scale);
            }
            step += 1;
            a_we.step(&mut c.w_embed, &g_we, &hp, step);
            a_be.step(&mut c.b_embed, &g_be, &hp_bias, step);
            a_wo.step(&mut c.w_out, &g_wo, &hp, step);
            a_bo.step(&mut c.b_out, &g_bo, &hp_bias, step);
        }
    }
    Ok(c)
}

/// Denoising-objective training: predict the noise injected by the closed
/// form forward diffusion at a uniformly drawn train step. One draw in ten
/// uses the null embedding so guided prediction stays meaningful.
fn fit_predictor(train: &ToyDataset, cfg: &FitConfig) -> Result<ToyPredictor> {
    let mut p = ToyPredictor::new(cfg.side, cfg.predictor_hidden, 1000, cfg.seed ^ 0xdf);
    for prompt in dataset::CLASS_PROMPTS {
        p.intern_prompt(prompt);
    }
    p.intern_prompt("");
    let schedule = DiffusionSchedule::default_with_steps(1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(303));
    let hp = AdamParams { lr: cfg.predictor_lr, weight_decay: cfg.weight_decay, ..Default::default() };
    let hp_embed = AdamParams { lr: cfg.predictor_lr, ..Default::default() };
    let m = (3 * cfg.side * cfg.side) as f64;

    let mut a_c1w = Adam::new(p.conv1_w.raw_dim());
    let mut a_c1b = Adam::new(p.conv1_b.raw_dim());
    let mut a_tw = Adam::new(p.time_w.raw_dim());
    let mut a_c2w = Adam::new(p.conv2_w.raw_dim());
    let mut a_c2b = Adam::new(p.conv2_b.raw_dim());
    let mut a_embed: BTreeMap<String, Adam<ndarray::Ix1>> = BTreeMap::new();

    for step in 1..=cfg.predictor_batches {
        let mut g_c1w = ndarray::Array4::zeros(p.conv1_w.raw_dim());
        let mut g_c1b = Array1::zeros(p.conv1_b.raw_dim());
        let mut g_tw = ndarray::Array2::zeros(p.time_w.raw_dim());
        let mut g_c2w = ndarray::Array4::zeros(p.conv2_w.raw_dim());
        let mut g_c2b = Array1::zeros(p.conv2_b.raw_dim());
        let mut g_embed: BTreeMap<String, Array1<f64>> = BTreeMap::new();
        let scale = 1.0 / cfg.predictor_batch_size as f64;
        let mut batch_loss = 0.0;
        for _ in 0..cfg.predictor_batch_size {
            let i = rng.gen_range(0..train.len());
            let t = rng.gen_range(0..1000usize);
            let eps = randn3((3, cfg.side, cfg.side), &mut rng);
            let z_t = forward_diffuse(&train.images[i], t, &eps, &schedule)?;
            let prompt =
                if rng.gen_bool(0.1) { String::new() } else { train.prompts[i].clone() };
            let e = p.embed_prompt(&prompt);
            let out = p.predict(&z_t, t, &e)?;
            let residual = &out - &eps;
            batch_loss += nn::mse3(&out, &eps) * scale;
            let cot = residual.mapv(|v| 2.0 * v / m * scale);
            let g = p.weight_grads(&z_t, t, &cot);
            g_c1w += &g.g_conv1_w;
            g_c1b += &g.g_conv1_b;
            g_tw += &g.g_time_w;
            g_c2w += &g.g_conv2_w;
            g_c2b += &g.g_conv2_b;
            g_embed
                .entry(prompt)
                .and_modify(|acc| *acc += &g.g_embed)
                .or_insert(g.g_embed);
        }
        a_c1w.step(&mut p.conv1_w, &g_c1w, &hp, step);
        a_c1b.step(&mut p.conv1_b, &g_c1b, &hp_embed, step);
        a_tw.step(&mut p.time_w, &g_tw, &hp, step);
        a_c2w.step(&mut p.conv2_w, &g_c2w, &hp, step);
        a_c2b.step(&mut p.conv2_b, &g_c2b, &hp_embed, step);
        for (prompt, grad) in g_embed {
            let entry = p
                .embed_table
                .get_mut(&prompt)
                .expect("prompts are interned before training");
            let opt = a_embed
                .entry(prompt)
                .or_insert_with(|| Adam::new(entry.raw_dim()));
            opt.step(entry, &grad, &hp_embed, step);
        }
        debug_assert!(batch_loss.is_finite(), "training diverged at step {step}");
    }
    Ok(p)
}

/// Training floor (re-measured on the training split with fresh noise) and
/// held-out denoising MSE.
fn predictor_floors(
    p: &ToyPredictor,
    train: &ToyDataset,
    eval: &ToyDataset,
    cfg: &FitConfig,
) -> Result<(f64, f64)> {
    let schedule = DiffusionSchedule::default_with_steps(1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(404));
    let measure = |ds: &ToyDataset, rng: &mut ChaCha8Rng| -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..ds.len() {
            for _ in 0..4 {
                let t = rng.gen_range(0..1000usize);
                let eps = randn3((3, cfg.side, cfg.side), rng);
                let z_t = forward_diffuse(&ds.images[i], t, &eps, &schedule)?;
                let e = p.embed_prompt(&ds.prompts[i]);
                let out = p.predict(&z_t, t, &e)?;
                total += nn::mse3(&out, &eps);
                count += 1;
            }
        }
        Ok(total / count as f64)
    };
    let floor = measure(train, &mut rng)?;
    let heldout = measure(eval, &mut rng)?;
    Ok((floor, heldout))
}

/// Directional finite-difference probes for every differentiable surface.
/// Returns the worst relative error; fails if it exceeds 1e-3.
fn post_fit_gradient_checks(
    p: &ToyPredictor,
    conv: &ConvClassifier,
    attn: &PatchAttnClassifier,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = p.side();
    let shape = (3usize, side, side);
    let mut worst = 0.0f64;
    let probes = 8;
    let h = 1e-4;

    let unit3 = |rng: &mut ChaCha8Rng| {
        let mut d = randn3(shape, rng);
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.mapv_inplace(|v| v / norm);
        d
    };

    for _ in 0..probes {
        let x = Array3::from_shape_fn(shape, |_| rng.gen_range(0.0..1.0));
        let label = rng.gen_range(0..conv.num_classes());
        let dir = unit3(&mut rng);

        for (grad, loss_at) in [
            (
                conv.input_gradient(&x, label, LossKind::CrossEntropy)?,
                Box::new(|probe: &Array3<f64>| {
                    nn::cross_entropy(&conv.logits(probe).unwrap(), label)
                }) as Box<dyn Fn(&Array3<f64>) -> f64>,
            ),
            (
                attn.input_gradient(&x, label, LossKind::CrossEntropy)?,
                Box::new(|probe: &Array3<f64>| {
                    nn::cross_entropy(&attn.logits(probe).unwrap(), label)
                }),
            ),
        ] {
            let analytic: f64 = grad.iter().zip(dir.iter()).map(|(g, d)| g * d).sum();
            let hi = loss_at(&(&x + &(&dir * h)));
            let lo = loss_at(&(&x - &(&dir * h)));
            let numeric = (hi - lo) / (2.0 * h);
            let scale = analytic.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((analytic - numeric).abs() / scale);
        }

        // Predictor embedding pathway, probed through a random cotangent.
        let z = randn3(shape, &mut rng);
        let t = rng.gen_range(0..p.total_train_steps());
        let e = p.embed_prompt(dataset::CLASS_PROMPTS[label % dataset::CLASS_PROMPTS.len()]);
        let cot = unit3(&mut rng);
        let evjp = p.embed_vjp(&z, t, &e, &cot)?;
        let edir = {
            let mut d = Array1::from_shape_fn(e.values.len(), |_| {
                rng.sample::<f64, _>(StandardNormal)
            });
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            d.mapv_inplace(|v| v / norm);
            d
        };
        let analytic: f64 = evjp.iter().zip(edir.iter()).map(|(g, d)| g * d).sum();
        let probe_val = |offset: f64| -> Result<f64> {
            let shifted = ConditionEmbedding { values: &e.values + &(&edir * offset), kind: e.kind };
            let out = p.predict(&z, t, &shifted)?;
            Ok(out.iter().zip(cot.iter()).map(|(o, c)| o * c).sum())
        };
        let numeric = (probe_val(h)? - probe_val(-h)?) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max((analytic - numeric).abs() / scale);
    }

    if worst >= 1e-3 {
        return Err(Error::Fit(format!(
            "post-fit gradient checks failed: max relative error {worst:.3e}"
        )));
    }
    Ok(worst)
}

/// Fisher-Yates with the run's seeded generator.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::test_fixture::{tiny_bundle, tiny_fit_config};

    #[test]
    fn tiny_fit_produces_above_chance_classifiers_and_sane_floors() {
        let bundle = tiny_bundle();
        for (name, acc) in &bundle.report.eval_accuracy {
            assert!(*acc > 0.4, "{name} eval accuracy {acc}");
        }
        assert!(bundle.report.training_floor_mse.is_finite());
        assert!(bundle.report.heldout_mse < bundle.report.training_floor_mse * 2.0);
        assert!(bundle.report.grad_check_max_rel_error < 1e-3);
    }

    #[test]
    fn fit_is_deterministic_under_fixed_seed() {
        let cfg = FitConfig {
            predictor_batches: 40,
            classifier_epochs: 4,
            per_class: 8,
            eval_count: 4,
            ..tiny_fit_config()
        };
        let a = fit_default_bundle(&cfg).unwrap();
        let b = fit_default_bundle(&cfg).unwrap();
        assert_eq!(a.predictor.conv1_w, b.predictor.conv1_w);
        assert_eq!(a.conv_classifier.fc_w, b.conv_classifier.fc_w);
        assert_eq!(a.attn_classifier.w_embed, b.attn_classifier.w_embed);
    }

    #[test]
    fn undersized_dataset_is_rejected() {
        let ds = dataset::generate(1, 16, 1);
        let cfg = FitConfig { eval_count: 64, ..tiny_fit_config() };
        assert!(fit_bundle(ds, &cfg).is_err());
    }
}

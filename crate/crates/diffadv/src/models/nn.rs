//! Minimal dense/conv kernels with hand-written backward passes, plus the
//! Adam optimizer used by the toy fitting procedures. Everything is f64 and
//! deterministic; finite-difference tests pin each backward pass.

use ndarray::{Array1, Array3, Array4};

/// Numerically stable softmax.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Array1<f64> = logits.mapv(|v| (v - max).exp());
    let sum: f64 = exps.sum();
    exps / sum
}

/// Cross-entropy `-log softmax(logits)[label]` via log-sum-exp.
pub fn cross_entropy(logits: &Array1<f64>, label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Gradient of cross-entropy with respect to the logits: `softmax - onehot`.
pub fn cross_entropy_grad(logits: &Array1<f64>, label: usize) -> Array1<f64> {
    let mut g = softmax(logits);
    g[label] -= 1.0;
    g
}

/// Mean squared error over two equally shaped arrays.
pub fn mse3(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    debug_assert_eq!(a.shape(), b.shape());
    let n = a.len() as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Peak signal-to-noise ratio for unit-range images, in dB.
pub fn psnr_db(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Sinusoidal timestep features: interleaved sin/cos at geometric frequencies.
pub fn time_features(t: usize, total: usize, dim: usize) -> Array1<f64> {
    debug_assert!(dim % 2 == 0);
    let tau = t as f64 / total.max(1) as f64;
    let mut out = Array1::zeros(dim);
    for j in 0..dim / 2 {
        let freq = 2f64.powi(j as i32) * std::f64::consts::PI;
        out[2 * j] = (freq * tau).sin();
        out[2 * j + 1] = (freq * tau).cos();
    }
    out
}

/// 3x3 convolution, stride 1, zero padding 1. Weights are `[out, in, 3, 3]`.
pub fn conv3x3(input: &Array3<f64>, weight: &Array4<f64>, bias: &Array1<f64>) -> Array3<f64> {
    let (cin, h, w) = input.dim();
    let (cout, wcin, kh, kw) = weight.dim();
    debug_assert_eq!(cin, wcin);
    debug_assert_eq!((kh, kw), (3, 3));
    debug_assert_eq!(bias.len(), cout);
    let mut out = Array3::zeros((cout, h, w));
    for co in 0..cout {
        for y in 0..h {
            for x in 0..w {
                let mut acc = bias[co];
                for ci in 0..cin {
                    for dy in 0..3usize {
                        let iy = y as isize + dy as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..3usize {
                            let ix = x as isize + dx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += input[[ci, iy as usize, ix as usize]] * weight[[co, ci, dy, dx]];
                        }
                    }
                }
                out[[co, y, x]] = acc;
            }
        }
    }
    out
}

/// Input gradient of [`conv3x3`].
pub fn conv3x3_grad_input(grad_out: &Array3<f64>, weight: &Array4<f64>) -> Array3<f64> {
    let (cout, h, w) = grad_out.dim();
    let (wcout, cin, _, _) = weight.dim();
    debug_assert_eq!(cout, wcout);
    let mut grad_in = Array3::zeros((cin, h, w));
    for co in 0..cout {
        for y in 0..h {
            for x in 0..w {
                let g = grad_out[[co, y, x]];
                if g == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    for dy in 0..3usize {
                        let iy = y as isize + dy as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..3usize {
                            let ix = x as isize + dx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            grad_in[[ci, iy as usize, ix as usize]] += g * weight[[co, ci, dy, dx]];
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Weight and bias gradients of [`conv3x3`].
pub fn conv3x3_grad_params(
    grad_out: &Array3<f64>,
    input: &Array3<f64>,
) -> (Array4<f64>, Array1<f64>) {
    let (cout, h, w) = grad_out.dim();
    let (cin, ih, iw) = input.dim();
    debug_assert_eq!((ih, iw), (h, w));
    let mut grad_w = Array4::zeros((cout, cin, 3, 3));
    let mut grad_b = Array1::zeros(cout);
    for co in 0..cout {
        for y in 0..h {
            for x in 0..w {
                let g = grad_out[[co, y, x]];
                grad_b[co] += g;
                if g == 0.0 {
                    continue;
                }
                for ci in 0..cin {
                    for dy in 0..3usize {
                        let iy = y as isize + dy as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..3usize {
                            let ix = x as isize + dx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            grad_w[[co, ci, dy, dx]] += g * input[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
        }
    }
    (grad_w, grad_b)
}

/// Elementwise tanh.
pub fn tanh3(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(f64::tanh)
}

/// Backward of tanh given the forward *output*.
pub fn tanh3_backward(grad_out: &Array3<f64>, output: &Array3<f64>) -> Array3<f64> {
    let mut g = grad_out.clone();
    g.zip_mut_with(output, |gv, &y| *gv *= 1.0 - y * y);
    g
}

/// Adam state for one tensor-shaped parameter.
#[derive(Debug, Clone)]
pub struct Adam<D: ndarray::Dimension> {
    m: ndarray::Array<f64, D>,
    v: ndarray::Array<f64, D>,
}

/// Shared Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl<D: ndarray::Dimension> Adam<D> {
    pub fn new(dim: D) -> Self {
        Self { m: ndarray::Array::zeros(dim.clone()), v: ndarray::Array::zeros(dim) }
    }

    /// One Adam update. `step` is 1-based.
    pub fn step(
        &mut self,
        param: &mut ndarray::Array<f64, D>,
        grad: &ndarray::Array<f64, D>,
        hp: &AdamParams,
        step: usize,
    ) {
        let b1t = 1.0 - hp.beta1.powi(step as i32);
        let b2t = 1.0 - hp.beta2.powi(step as i32);
        ndarray::Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                let g = g + hp.weight_decay * *p;
                *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
                *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
                let mhat = *m / b1t;
                let vhat = *v / b2t;
                *p -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, max_rel_error};
    use ndarray::{Array1, Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn rand3(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
        Array3::from_shape_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn softmax_sums_to_one_and_ce_matches_uniform() {
        let logits = Array1::from_vec(vec![0.5, 0.5, 0.5, 0.5]);
        let p = softmax(&logits);
        assert!((p.sum() - 1.0).abs() < 1e-12);
        for y in 0..4 {
            assert!((cross_entropy(&logits, y) - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        let logits = Array1::from_vec(vec![0.2, -1.0, 0.7, 0.05]);
        let grad = cross_entropy_grad(&logits, 2);
        let fd = finite_diff_grad(
            |v| cross_entropy(&Array1::from_vec(v.to_vec()), 2),
            logits.as_slice().unwrap(),
            1e-6,
        );
        assert!(max_rel_error(grad.as_slice().unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let input = rand3((2, 4, 4), &mut rng);
        let weight = Array4::from_shape_fn((3, 2, 3, 3), |_| {
            rng.sample::<f64, _>(StandardNormal) * 0.5
        });
        let bias = Array1::from_shape_fn(3, |_| rng.sample::<f64, _>(StandardNormal) * 0.1);
        // Scalar objective: sum of squared outputs.
        let loss = |out: &Array3<f64>| out.iter().map(|v| v * v).sum::<f64>();
        let out = conv3x3(&input, &weight, &bias);
        let grad_out = out.mapv(|v| 2.0 * v);
        let grad_in = conv3x3_grad_input(&grad_out, &weight);
        let (grad_w, grad_b) = conv3x3_grad_params(&grad_out, &input);

        let fd_in = finite_diff_grad(
            |v| {
                let x = Array3::from_shape_vec((2, 4, 4), v.to_vec()).unwrap();
                loss(&conv3x3(&x, &weight, &bias))
            },
            input.as_slice().unwrap(),
            1e-5,
        );
        assert!(max_rel_error(grad_in.as_slice().unwrap(), &fd_in) < 1e-6);

        let fd_w = finite_diff_grad(
            |v| {
                let w = Array4::from_shape_vec((3, 2, 3, 3), v.to_vec()).unwrap();
                loss(&conv3x3(&input, &w, &bias))
            },
            weight.as_slice().unwrap(),
            1e-5,
        );
        assert!(max_rel_error(grad_w.as_slice().unwrap(), &fd_w) < 1e-6);

        let fd_b = finite_diff_grad(
            |v| {
                let b = Array1::from_vec(v.to_vec());
                loss(&conv3x3(&input, &weight, &b))
            },
            bias.as_slice().unwrap(),
            1e-5,
        );
        assert!(max_rel_error(grad_b.as_slice().unwrap(), &fd_b) < 1e-6);
    }

    #[test]
    fn tanh_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand3((1, 3, 3), &mut rng);
        let y = tanh3(&x);
        let grad_out = Array3::from_elem((1, 3, 3), 1.0);
        let grad = tanh3_backward(&grad_out, &y);
        let fd = finite_diff_grad(
            |v| {
                let a = Array3::from_shape_vec((1, 3, 3), v.to_vec()).unwrap();
                tanh3(&a).sum()
            },
            x.as_slice().unwrap(),
            1e-6,
        );
        assert!(max_rel_error(grad.as_slice().unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = Array1::from_vec(vec![5.0, -3.0]);
        let mut opt = Adam::new(p.raw_dim());
        let hp = AdamParams { lr: 0.1, ..Default::default() };
        for step in 1..=500 {
            let grad = p.mapv(|v| 2.0 * v);
            opt.step(&mut p, &grad, &hp, step);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-2), "params did not converge: {p:?}");
    }

    #[test]
    fn time_features_are_bounded_and_deterministic() {
        let a = time_features(500, 1000, 8);
        let b = time_features(500, 1000, 8);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(time_features(10, 1000, 8), time_features(900, 1000, 8));
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        assert!(psnr_db(0.0).is_infinite());
        assert!((psnr_db(0.01) - 20.0).abs() < 1e-12);
    }
}

//! Procedurally generated miniature image set for the toy backend: four
//! pattern classes over random color pairs. Images are quantized to the
//! 8-bit lattice at generation time so in-memory arrays survive PNG
//! round-trips bit-exactly.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io;

/// One prompt per class; these feed the toy backend's prompt encoder.
pub const CLASS_PROMPTS: [&str; 4] = [
    "horizontal stripes",
    "vertical stripes",
    "a bright disk",
    "a checkerboard",
];

/// Labeled image collection with per-image prompts.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub ids: Vec<String>,
    pub images: Vec<Array3<f64>>,
    pub labels: Vec<usize>,
    pub prompts: Vec<String>,
    pub num_classes: usize,
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Deterministic stratified split: the first images of each class fill
    /// the evaluation set, keeping it class-balanced; the rest train.
    pub fn split_eval(&self, n_eval: usize) -> (ToyDataset, ToyDataset) {
        let n = self.len();
        assert!(n_eval < n, "evaluation split must leave training data");
        let classes = self.num_classes;
        let mut quota = vec![n_eval / classes; classes];
        for extra in quota.iter_mut().take(n_eval % classes) {
            *extra += 1;
        }
        let mut train = ToyDataset {
            ids: vec![],
            images: vec![],
            labels: vec![],
            prompts: vec![],
            num_classes: classes,
        };
        let mut eval = train.clone();
        let mut taken = vec![0usize; classes];
        for j in 0..n {
            let label = self.labels[j];
            let dst = if taken[label] < quota[label] {
                taken[label] += 1;
                &mut eval
            } else {
                &mut train
            };
            dst.ids.push(self.ids[j].clone());
            dst.images.push(self.images[j].clone());
            dst.labels.push(self.labels[j]);
            dst.prompts.push(self.prompts[j].clone());
        }
        (train, eval)
    }

    /// Persist as `images/<id>.png` plus a `labels.csv` of `id,label,prompt`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let mut csv = String::from("id,label,prompt\n");
        for i in 0..self.len() {
            io::save_png(&img_dir.join(format!("{}.png", self.ids[i])), &self.images[i])?;
            csv.push_str(&format!("{},{},{}\n", self.ids[i], self.labels[i], self.prompts[i]));
        }
        let csv_path = dir.join("labels.csv");
        fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))
    }

    pub fn load(dir: &Path) -> Result<ToyDataset> {
        let csv_path = dir.join("labels.csv");
        let text = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let mut ids = Vec::new();
        let mut images = Vec::new();
        let mut labels = Vec::new();
        let mut prompts = Vec::new();
        let mut max_label = 0;
        for (lineno, line) in text.lines().enumerate() {
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.splitn(3, ',').collect();
            if parts.len() != 3 {
                return Err(Error::Format(format!(
                    "labels.csv line {} malformed: {line:?}",
                    lineno + 1
                )));
            }
            let id = parts[0].to_string();
            let label: usize = parts[1]
                .parse()
                .map_err(|_| Error::Format(format!("bad label on line {}", lineno + 1)))?;
            max_label = max_label.max(label);
            images.push(io::load_png(&dir.join("images").join(format!("{id}.png")))?);
            ids.push(id);
            labels.push(label);
            prompts.push(parts[2].to_string());
        }
        if images.is_empty() {
            return Err(Error::Format(format!("no images listed in {}", csv_path.display())));
        }
        Ok(ToyDataset { ids, images, labels, prompts, num_classes: max_label + 1 })
    }
}

/// Generate `per_class` images of each pattern class at `side`x`side` pixels.
/// Classes are interleaved (0,1,2,3,0,1,...) so prefix slices stay balanced.
pub fn generate(per_class: usize, side: usize, seed: u64) -> ToyDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = per_class * CLASS_PROMPTS.len();
    let mut ds = ToyDataset {
        ids: Vec::with_capacity(n),
        images: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        prompts: Vec::with_capacity(n),
        num_classes: CLASS_PROMPTS.len(),
    };
    for i in 0..n {
        let label = i % CLASS_PROMPTS.len();
        let img = render_pattern(label, side, &mut rng);
        ds.ids.push(format!("img_{i:04}"));
        ds.images.push(img);
        ds.labels.push(label);
        ds.prompts.push(CLASS_PROMPTS[label].to_string());
    }
    ds
}

/// Two random colors with enough contrast to keep the classes learnable.
fn color_pair(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    loop {
        let a = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let b = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let dist2: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        if dist2 > 0.35 {
            return (a, b);
        }
    }
}

fn render_pattern(label: usize, side: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (fg, bg) = color_pair(rng);
    let period = rng.gen_range(2..=4usize);
    let phase = rng.gen_range(0..period);
    let cell = rng.gen_range(2..=4usize);
    let cx = rng.gen_range(side / 4..3 * side / 4) as f64;
    let cy = rng.gen_range(side / 4..3 * side / 4) as f64;
    let radius = rng.gen_range(side as f64 * 0.2..side as f64 * 0.35);
    let noise_sigma = 0.02;

    let mut img = Array3::zeros((3, side, side));
    for y in 0..side {
        for x in 0..side {
            let use_fg = match label {
                0 => (y + phase) / period % 2 == 0,
                1 => (x + phase) / period % 2 == 0,
                2 => {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    (dx * dx + dy * dy).sqrt() <= radius
                }
                _ => (x / cell + y / cell) % 2 == 0,
            };
            let color = if use_fg { &fg } else { &bg };
            for c in 0..3 {
                let n: f64 = rng.sample(StandardNormal);
                let v = (color[c] + noise_sigma * n).clamp(0.0, 1.0);
                // Snap to the 8-bit lattice so PNG round-trips are exact.
                img[[c, y, x]] = (v * 255.0).round() / 255.0;
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = generate(8, 16, 33);
        let b = generate(8, 16, 33);
        assert_eq!(a.images, b.images);
        assert_eq!(a.len(), 32);
        for class in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 8);
        }
        assert!(a.images.iter().all(|im| im.iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate(2, 16, 1);
        let b = generate(2, 16, 2);
        assert_ne!(a.images, b.images);
    }

    #[test]
    fn save_load_round_trips_bit_exactly() {
        let dir = tempdir().unwrap();
        let ds = generate(3, 16, 5);
        ds.save(dir.path()).unwrap();
        let back = ToyDataset::load(dir.path()).unwrap();
        assert_eq!(back.images, ds.images);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.prompts, ds.prompts);
        assert_eq!(back.num_classes, 4);
    }

    #[test]
    fn eval_split_is_balanced_and_disjoint() {
        let ds = generate(16, 16, 9);
        let (train, eval) = ds.split_eval(16);
        assert_eq!(eval.len(), 16);
        assert_eq!(train.len(), 48);
        for class in 0..4 {
            assert_eq!(eval.labels.iter().filter(|&&l| l == class).count(), 4);
        }
        for id in &eval.ids {
            assert!(!train.ids.contains(id));
        }
    }
}

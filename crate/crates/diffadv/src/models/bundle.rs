//! The persisted toy backend: predictor, both classifiers, the dataset they
//! were fitted on, fit metrics, and the frozen evaluation thresholds.
//!
//! On disk a bundle is a directory:
//!
//! ```text
//! bundle/
//!   manifest.json   # version, architecture, fit config/report, thresholds
//!   weights.bin     # all weights as little-endian f32, fixed order
//!   dataset/        # images/*.png + labels.csv
//! ```

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::models::dataset::ToyDataset;
use crate::models::fit::{FitConfig, FitReport};
use crate::models::registry::ModelRegistry;
use crate::models::toy::{ConvClassifier, PatchAttnClassifier, ToyPredictor};

const BUNDLE_VERSION: u32 = 1;

/// Evaluation thresholds frozen at fit time.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AcceptanceThresholds {
    /// Mean reconstruction PSNR over the held-out split, dB.
    pub min_psnr_db: f64,
    /// Fraction of reconstructions keeping the surrogate's clean prediction.
    pub min_label_preservation: f64,
    /// White-box attack success rate on the surrogate, percent.
    pub min_whitebox_asr: f64,
    /// Black-box ASR margin over the clean baseline, percentage points.
    pub min_blackbox_margin_points: f64,
}

impl Default for AcceptanceThresholds {
    fn default() -> Self {
        Self {
            min_psnr_db: 25.0,
            min_label_preservation: 0.90,
            min_whitebox_asr: 80.0,
            min_blackbox_margin_points: 15.0,
        }
    }
}

/// Fitted toy backend plus everything needed to reproduce its evaluation.
#[derive(Debug, Clone)]
pub struct ToyBackendBundle {
    pub predictor: ToyPredictor,
    pub conv_classifier: ConvClassifier,
    pub attn_classifier: PatchAttnClassifier,
    pub dataset: ToyDataset,
    pub eval_count: usize,
    pub seed: u64,
    pub fit_config: FitConfig,
    pub report: FitReport,
    pub thresholds: AcceptanceThresholds,
}

impl ToyBackendBundle {
    pub const BACKEND_NAME: &'static str = "toy";
    pub const CONV_NAME: &'static str = "toy-conv";
    pub const ATTN_NAME: &'static str = "toy-attn";

    /// Register the backend and both classifiers under their bundle names.
    pub fn register_into(&self, registry: &mut ModelRegistry) -> Result<()> {
        registry.register_backend(Self::BACKEND_NAME, Arc::new(self.predictor.clone()))?;
        registry.register_classifier(Self::CONV_NAME, Arc::new(self.conv_classifier.clone()))?;
        registry.register_classifier(Self::ATTN_NAME, Arc::new(self.attn_classifier.clone()))?;
        Ok(())
    }

    /// The train/eval split used during fitting.
    pub fn train_eval(&self) -> (ToyDataset, ToyDataset) {
        self.dataset.split_eval(self.eval_count)
    }

    /// Checksum over the packed weight stream.
    pub fn weights_checksum(&self) -> String {
        io::checksum_f32(self.packed_weights().into_iter())
    }

    fn packed_weights(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let p = &self.predictor;
        out.extend(p.conv1_w.iter());
        out.extend(p.conv1_b.iter());
        out.extend(p.time_w.iter());
        out.extend(p.conv2_w.iter());
        out.extend(p.conv2_b.iter());
        for values in p.embed_table.values() {
            out.extend(values.iter());
        }
        let c = &self.conv_classifier;
        out.extend(c.conv1_w.iter());
        out.extend(c.conv1_b.iter());
        out.extend(c.conv2_w.iter());
        out.extend(c.conv2_b.iter());
        out.extend(c.fc_w.iter());
        out.extend(c.fc_b.iter());
        let a = &self.attn_classifier;
        out.extend(a.w_embed.iter());
        out.extend(a.b_embed.iter());
        out.extend(a.w_out.iter());
        out.extend(a.b_out.iter());
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let weights_path = dir.join("weights.bin");
        io::write_raw_f32(&weights_path, self.packed_weights().into_iter())?;
        let manifest = BundleManifest {
            version: BUNDLE_VERSION,
            seed: self.seed,
            eval_count: self.eval_count,
            fit_config: self.fit_config.clone(),
            report: self.report.clone(),
            thresholds: self.thresholds.clone(),
            arch: ArchManifest::describe(self),
            weights_sha256: io::sha256_file(&weights_path)?,
        };
        let manifest_path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::json(&manifest_path, e))?;
        fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
        self.dataset.save(&dir.join("dataset"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: BundleManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(&manifest_path, e))?;
        if manifest.version != BUNDLE_VERSION {
            return Err(Error::Format(format!(
                "bundle version {} unsupported (expected {BUNDLE_VERSION})",
                manifest.version
            )));
        }
        let weights_path = dir.join("weights.bin");
        let actual = io::sha256_file(&weights_path)?;
        if actual != manifest.weights_sha256 {
            return Err(Error::Format(format!(
                "weights checksum mismatch: manifest {} vs file {actual}",
                manifest.weights_sha256
            )));
        }
        let data = io::read_raw_f32(&weights_path)?;
        let mut reader = WeightReader { data, pos: 0 };
        let arch = &manifest.arch;

        let mut predictor = ToyPredictor::new(
            arch.side,
            arch.predictor_hidden,
            arch.total_train_steps,
            manifest.seed,
        );
        predictor.embed_gain = arch.embed_gain;
        predictor.embed_scale = arch.embed_scale;
        let edim = 3 * arch.side * arch.side;
        predictor.conv1_w = reader.take4((arch.predictor_hidden, 3, 3, 3))?;
        predictor.conv1_b = reader.take1(arch.predictor_hidden)?;
        predictor.time_w = reader.take2((arch.predictor_hidden, arch.predictor_time_dim))?;
        predictor.conv2_w = reader.take4((3, arch.predictor_hidden, 3, 3))?;
        predictor.conv2_b = reader.take1(3)?;
        predictor.embed_table.clear();
        for key in &arch.embed_table_keys {
            predictor.embed_table.insert(key.clone(), reader.take1(edim)?);
        }

        let mut conv = ConvClassifier::new(arch.side, arch.conv_hidden, arch.classes, 0);
        conv.conv1_w = reader.take4((arch.conv_hidden, 3, 3, 3))?;
        conv.conv1_b = reader.take1(arch.conv_hidden)?;
        conv.conv2_w = reader.take4((arch.conv_hidden, arch.conv_hidden, 3, 3))?;
        conv.conv2_b = reader.take1(arch.conv_hidden)?;
        conv.fc_w = reader.take2((arch.classes, arch.conv_hidden))?;
        conv.fc_b = reader.take1(arch.classes)?;

        let mut attn =
            PatchAttnClassifier::new(arch.side, arch.attn_patch, arch.attn_dmodel, arch.classes, 0);
        let din = 3 * arch.attn_patch * arch.attn_patch;
        attn.w_embed = reader.take2((arch.attn_dmodel, din))?;
        attn.b_embed = reader.take1(arch.attn_dmodel)?;
        attn.w_out = reader.take2((arch.classes, arch.attn_dmodel))?;
        attn.b_out = reader.take1(arch.classes)?;

        reader.finish()?;
        let dataset = ToyDataset::load(&dir.join("dataset"))?;

        Ok(Self {
            predictor,
            conv_classifier: conv,
            attn_classifier: attn,
            dataset,
            eval_count: manifest.eval_count,
            seed: manifest.seed,
            fit_config: manifest.fit_config,
            report: manifest.report,
            thresholds: manifest.thresholds,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleManifest {
    version: u32,
    seed: u64,
    eval_count: usize,
    fit_config: FitConfig,
    report: FitReport,
    thresholds: AcceptanceThresholds,
    arch: ArchManifest,
    weights_sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArchManifest {
    side: usize,
    classes: usize,
    predictor_hidden: usize,
    predictor_time_dim: usize,
    total_train_steps: usize,
    embed_gain: f64,
    embed_scale: f64,
    embed_table_keys: Vec<String>,
    conv_hidden: usize,
    attn_patch: usize,
    attn_dmodel: usize,
}

impl ArchManifest {
    fn describe(bundle: &ToyBackendBundle) -> Self {
        let p = &bundle.predictor;
        Self {
            side: p.side,
            classes: bundle.conv_classifier.classes,
            predictor_hidden: p.hidden,
            predictor_time_dim: p.time_dim,
            total_train_steps: p.total_train_steps,
            embed_gain: p.embed_gain,
            embed_scale: p.embed_scale,
            embed_table_keys: p.embed_table.keys().cloned().collect(),
            conv_hidden: bundle.conv_classifier.hidden,
            attn_patch: bundle.attn_classifier.patch,
            attn_dmodel: bundle.attn_classifier.dmodel,
        }
    }
}

struct WeightReader {
    data: Vec<f64>,
    pos: usize,
}

impl WeightReader {
    fn take(&mut self, n: usize) -> Result<&[f64]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format(format!(
                "weights.bin exhausted: wanted {n} values at offset {}, have {}",
                self.pos,
                self.data.len()
            )));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn take1(&mut self, n: usize) -> Result<Array1<f64>> {
        Ok(Array1::from_vec(self.take(n)?.to_vec()))
    }

    fn take2(&mut self, dim: (usize, usize)) -> Result<Array2<f64>> {
        let v = self.take(dim.0 * dim.1)?.to_vec();
        Array2::from_shape_vec(dim, v).map_err(|e| Error::Format(e.to_string()))
    }

    fn take4(&mut self, dim: (usize, usize, usize, usize)) -> Result<Array4<f64>> {
        let v = self.take(dim.0 * dim.1 * dim.2 * dim.3)?.to_vec();
        Array4::from_shape_vec(dim, v).map_err(|e| Error::Format(e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Format(format!(
                "weights.bin has {} trailing values",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::test_fixture::tiny_bundle;
    use crate::models::traits::{Classifier, NoisePredictor};
    use tempfile::tempdir;

    #[test]
    fn bundle_round_trips_through_disk_with_f32_narrowing() {
        let bundle = tiny_bundle();
        let dir = tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        let back = ToyBackendBundle::load(dir.path()).unwrap();
        // Weights narrow to f32 on disk; compare at f32 precision.
        for (a, b) in bundle.predictor.conv1_w.iter().zip(back.predictor.conv1_w.iter()) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert_eq!(bundle.dataset.images, back.dataset.images);
        assert_eq!(bundle.thresholds, back.thresholds);
        assert_eq!(
            bundle.predictor.embed_table().keys().collect::<Vec<_>>(),
            back.predictor.embed_table().keys().collect::<Vec<_>>()
        );
        // A reloaded bundle saves to an identical weight stream.
        let dir2 = tempdir().unwrap();
        back.save(dir2.path()).unwrap();
        let h1 = crate::io::sha256_file(&dir.path().join("weights.bin")).unwrap();
        let h2 = crate::io::sha256_file(&dir2.path().join("weights.bin")).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn corrupted_weights_are_rejected() {
        let bundle = tiny_bundle();
        let dir = tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        let path = dir.path().join("weights.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&path, bytes).unwrap();
        assert!(ToyBackendBundle::load(dir.path()).is_err());
    }

    #[test]
    fn registry_registration_exposes_all_names() {
        let bundle = tiny_bundle();
        let mut reg = ModelRegistry::new();
        bundle.register_into(&mut reg).unwrap();
        assert!(reg.backend("toy").is_ok());
        assert_eq!(reg.classifier_names(), vec!["toy-attn".to_string(), "toy-conv".to_string()]);
        let backend = reg.backend("toy").unwrap();
        assert!(backend.differentiable());
        let clf = reg.classifier("toy-conv").unwrap();
        assert_eq!(clf.num_classes(), 4);
    }
}

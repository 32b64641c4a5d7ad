//! Model interfaces, the toy desk-scale backend, and the model registry.

pub mod bundle;
pub mod dataset;
pub mod fit;
pub mod nn;
pub mod registry;
pub mod testing;
pub mod toy;
pub mod traits;

pub use registry::ModelRegistry;
pub use traits::{Classifier, LossKind, NoisePredictor};

/// Shared fitted bundle for unit tests. Fitting even a tiny backend takes a
/// second or two, so the suites share one instance.
#[cfg(test)]
pub(crate) mod test_fixture {
    use std::sync::OnceLock;

    use super::bundle::ToyBackendBundle;
    use super::fit::{fit_default_bundle, FitConfig};

    pub(crate) fn tiny_fit_config() -> FitConfig {
        FitConfig {
            seed: 5,
            side: 16,
            per_class: 12,
            eval_count: 8,
            predictor_hidden: 6,
            predictor_batches: 150,
            predictor_batch_size: 4,
            classifier_epochs: 14,
            ..Default::default()
        }
    }

    pub(crate) fn tiny_bundle() -> &'static ToyBackendBundle {
        static CELL: OnceLock<ToyBackendBundle> = OnceLock::new();
        CELL.get_or_init(|| {
            fit_default_bundle(&tiny_fit_config()).expect("tiny fixture bundle fits")
        })
    }
}

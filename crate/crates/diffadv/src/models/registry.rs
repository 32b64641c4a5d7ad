//! Name-keyed registry binding diffusion backends and classifiers for a run.
//!
//! Registration is explicit and duplicate names are rejected; resolution
//! failures name the missing entry and the registered alternatives so batch
//! configs fail loudly instead of silently skipping models.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::models::traits::{Classifier, NoisePredictor};

/// Registry of named backends and classifiers.
#[derive(Default, Clone)]
pub struct ModelRegistry {
    backends: BTreeMap<String, Arc<dyn NoisePredictor>>,
    classifiers: BTreeMap<String, Arc<dyn Classifier>>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a diffusion backend under a unique name.
    pub fn register_backend(
        &mut self,
        name: impl Into<String>,
        backend: Arc<dyn NoisePredictor>,
    ) -> Result<()> {
        let name = name.into();
        if self.backends.contains_key(&name) {
            return Err(Error::Registry(format!("backend '{name}' already registered")));
        }
        self.backends.insert(name, backend);
        Ok(())
    }

    /// Register a classifier under a unique name.
    pub fn register_classifier(
        &mut self,
        name: impl Into<String>,
        classifier: Arc<dyn Classifier>,
    ) -> Result<()> {
        let name = name.into();
        if self.classifiers.contains_key(&name) {
            return Err(Error::Registry(format!("classifier '{name}' already registered")));
        }
        self.classifiers.insert(name, classifier);
        Ok(())
    }

    pub fn backend(&self, name: &str) -> Result<Arc<dyn NoisePredictor>> {
        self.backends.get(name).cloned().ok_or_else(|| {
            Error::Registry(format!(
                "backend '{name}' not registered (have: {:?})",
                self.backends.keys().collect::<Vec<_>>()
            ))
        })
    }

    pub fn classifier(&self, name: &str) -> Result<Arc<dyn Classifier>> {
        self.classifiers.get(name).cloned().ok_or_else(|| {
            Error::Registry(format!(
                "classifier '{name}' not registered (have: {:?})",
                self.classifiers.keys().collect::<Vec<_>>()
            ))
        })
    }

    /// All classifier names, sorted. These form the transfer matrix axes.
    pub fn classifier_names(&self) -> Vec<String> {
        self.classifiers.keys().cloned().collect()
    }

    pub fn backend_names(&self) -> Vec<String> {
        self.backends.keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::testing::{LinearSoftmaxClassifier, ZeroPredictor};

    #[test]
    fn registration_and_resolution_round_trip() {
        let mut reg = ModelRegistry::new();
        reg.register_backend("toy", Arc::new(ZeroPredictor::new([3, 4, 4], 8))).unwrap();
        reg.register_classifier("lin", Arc::new(LinearSoftmaxClassifier::seeded([3, 4, 4], 4, 1)))
            .unwrap();
        assert!(reg.backend("toy").is_ok());
        assert!(reg.classifier("lin").is_ok());
        assert_eq!(reg.classifier_names(), vec!["lin".to_string()]);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut reg = ModelRegistry::new();
        reg.register_backend("toy", Arc::new(ZeroPredictor::new([3, 4, 4], 8))).unwrap();
        let err = reg.register_backend("toy", Arc::new(ZeroPredictor::new([3, 4, 4], 8)));
        assert!(matches!(err, Err(Error::Registry(_))));
    }

    #[test]
    fn unknown_names_fail_loudly() {
        let reg = ModelRegistry::new();
        let err = match reg.backend("missing") {
            Err(e) => e,
            Ok(_) => panic!("resolution should fail"),
        };
        assert!(err.to_string().contains("missing"));
    }

    #[test]
    fn classifier_axes_are_sorted_and_complete() {
        let mut reg = ModelRegistry::new();
        reg.register_classifier("b", Arc::new(LinearSoftmaxClassifier::seeded([3, 4, 4], 4, 1)))
            .unwrap();
        reg.register_classifier("a", Arc::new(LinearSoftmaxClassifier::seeded([3, 4, 4], 4, 2)))
            .unwrap();
        assert_eq!(reg.classifier_names(), vec!["a".to_string(), "b".to_string()]);
    }
}

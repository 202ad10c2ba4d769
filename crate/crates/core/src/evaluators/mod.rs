//! Independent classifiers that judge generated images: a small CNN and an
//! extreme learning machine.

pub mod cnn;
pub mod elm;

pub use cnn::{build_cnn, evaluate_cnn, train_cnn, Cnn, CnnConfig};
pub use elm::{elm_train, evaluate_elm, pinv, train_elm, ElmModel};

use crate::corpus::DatasetManifest;
use crate::error::{Error, Result};

/// Manifest labels expressed in a model's class indexing, matched by name.
pub(crate) fn labels_by_name(classes: &[String], manifest: &DatasetManifest) -> Result<Vec<usize>> {
    manifest
        .records()
        .iter()
        .map(|r| {
            classes.iter().position(|c| *c == r.family.name).ok_or_else(|| Error::UnknownLabel(r.family.name.clone()))
        })
        .collect()
}

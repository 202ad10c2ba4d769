//! Extreme learning machine: a random, fixed sigmoid hidden layer whose
//! output weights are the minimum-norm least-squares fit `pinv(Φ)·T`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::labels_by_name;
use crate::convert::load_scaled_images;
use crate::corpus::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::nn::loss::argmax;

/// Singular values below this fraction of the largest are treated as zero.
pub const PINV_CUTOFF: f64 = 1e-10;

/// Default hidden width for an image side length.
pub fn default_hidden_units(image_size: usize) -> usize {
    match image_size {
        64 => 50_000,
        128 => 20_000,
        _ => 5000,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElmModel {
    pub classes: Vec<String>,
    pub activation: String,
    pub seed: u64,
    /// `d×H`
    pub hidden_weights: DMatrix<f64>,
    pub hidden_bias: DVector<f64>,
    /// `H×K`
    pub output_weights: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    input_dim: usize,
    hidden_units: usize,
    num_classes: usize,
    activation: String,
    classes: Vec<String>,
    seed: u64,
}

const MAGIC: &[u8; 8] = b"MFELM001";

/// Moore-Penrose pseudoinverse via SVD with a relative singular-value cutoff.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let eps = relative_cutoff(&svd.singular_values);
    svd.pseudo_inverse(eps).expect("both factors were computed")
}

fn relative_cutoff(singular: &DVector<f64>) -> f64 {
    PINV_CUTOFF * singular.iter().copied().fold(0.0, f64::max)
}

/// Minimum-norm least-squares solution of `a·x = b`, i.e. `pinv(a)·b`.
pub fn least_squares(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let eps = relative_cutoff(&svd.singular_values);
    svd.solve(b, eps).expect("both factors were computed")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(labels.len(), classes);
    for (i, &y) in labels.iter().enumerate() {
        t[(i, y)] = 1.0;
    }
    t
}

/// Fits an ELM with `hidden_units` sigmoid units on `N×d` features.
pub fn elm_train(
    features: &DMatrix<f64>,
    labels: &[usize],
    num_classes: usize,
    hidden_units: usize,
    seed: u64,
) -> Result<ElmModel> {
    if hidden_units == 0 {
        return Err(Error::field("hidden_units", "must be at least 1"));
    }
    if num_classes == 0 {
        return Err(Error::field("num_classes", "must be at least 1"));
    }
    let (n, d) = features.shape();
    if n == 0 {
        return Err(Error::Empty("no training samples".into()));
    }
    if labels.len() != n {
        return Err(Error::Shape { expected: format!("{n} labels"), got: labels.len().to_string() });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::LabelOutOfRange { label: bad, classes: num_classes });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..d * hidden_units).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let b: Vec<f64> = (0..hidden_units).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let mut model = ElmModel {
        classes: (0..num_classes).map(|k| format!("class{k:02}")).collect(),
        activation: "sigmoid".into(),
        seed,
        hidden_weights: DMatrix::from_row_slice(d, hidden_units, &w),
        hidden_bias: DVector::from_vec(b),
        output_weights: DMatrix::zeros(hidden_units, num_classes),
    };
    let phi = model.hidden(features);
    model.output_weights = least_squares(&phi, &one_hot(labels, num_classes));
    Ok(model)
}

impl ElmModel {
    pub fn input_dim(&self) -> usize {
        self.hidden_weights.nrows()
    }

    pub fn hidden_units(&self) -> usize {
        self.hidden_weights.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.output_weights.ncols()
    }

    pub fn with_classes(mut self, classes: Vec<String>) -> Result<Self> {
        if classes.len() != self.num_classes() {
            return Err(Error::Config(format!(
                "{} class names for a {}-class model",
                classes.len(),
                self.num_classes()
            )));
        }
        self.classes = classes;
        Ok(self)
    }

    /// Hidden activations `Φ = sigmoid(X·W + b)`, `N×H`.
    pub fn hidden(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        let mut phi = features * &self.hidden_weights;
        for mut row in phi.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(self.hidden_bias.iter()) {
                *v = sigmoid(*v + b);
            }
        }
        phi
    }

    /// Output scores `Φ·β`, `N×K`.
    pub fn scores(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        self.hidden(features) * &self.output_weights
    }

    pub fn predict(&self, features: &DMatrix<f64>) -> Result<Vec<usize>> {
        if features.ncols() != self.input_dim() {
            return Err(Error::Shape {
                expected: format!("{} features", self.input_dim()),
                got: features.ncols().to_string(),
            });
        }
        let scores = self.scores(features);
        Ok(scores.row_iter().map(|r| argmax(&r.iter().copied().collect::<Vec<_>>())).collect())
    }

    /// Binary array file (row-major `f64`) plus a `.json` metadata sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let (d, h, k) = (self.input_dim(), self.hidden_units(), self.num_classes());
        let mut buf = Vec::with_capacity(32 + 8 * (d * h + h + h * k));
        buf.extend_from_slice(MAGIC);
        for dim in [d, h, k] {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        let row_major = |m: &DMatrix<f64>, buf: &mut Vec<u8>| {
            for row in m.row_iter() {
                for v in row.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        row_major(&self.hidden_weights, &mut buf);
        for v in self.hidden_bias.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        row_major(&self.output_weights, &mut buf);
        fs::write(path, buf).map_err(|e| Error::io(path, e))?;
        let meta = Metadata {
            input_dim: d,
            hidden_units: h,
            num_classes: k,
            activation: self.activation.clone(),
            classes: self.classes.clone(),
            seed: self.seed,
        };
        let json = crate::acgan::sidecar_path(path);
        fs::write(&json, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&json, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = crate::acgan::sidecar_path(path);
        let meta: Metadata = serde_json::from_str(&fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?)?;
        if meta.activation != "sigmoid" {
            return Err(Error::Checkpoint(format!("unsupported activation `{}`", meta.activation)));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (d, h, k) = (meta.input_dim, meta.hidden_units, meta.num_classes);
        let expected = 32 + 8 * (d * h + h + h * k);
        if bytes.len() != expected || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a {d}x{h}x{k} model file", path.display())));
        }
        let header: Vec<usize> =
            bytes[8..32].chunks(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize).collect();
        if header != [d, h, k] {
            return Err(Error::Checkpoint("model file and metadata disagree on dimensions".into()));
        }
        let values: Vec<f64> = bytes[32..].chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let (w, rest) = values.split_at(d * h);
        let (b, beta) = rest.split_at(h);
        Ok(ElmModel {
            classes: meta.classes,
            activation: meta.activation,
            seed: meta.seed,
            hidden_weights: DMatrix::from_row_slice(d, h, w),
            hidden_bias: DVector::from_column_slice(b),
            output_weights: DMatrix::from_row_slice(h, k, beta),
        })
    }
}

/// `N×n²` feature matrix of a manifest's scaled images.
pub fn manifest_features(manifest: &DatasetManifest) -> Result<DMatrix<f64>> {
    let n2 = manifest.image_size() * manifest.image_size();
    Ok(DMatrix::from_row_slice(manifest.len(), n2, &load_scaled_images(manifest)?))
}

/// Trains on `split.train` and reports on `split.test`.
pub fn train_elm(split: &Split, hidden_units: usize, seed: u64) -> Result<(ElmModel, EvalReport)> {
    let train = &split.train;
    if train.num_classes() < 2 {
        return Err(Error::Config("a classifier needs at least 2 classes in the training set".into()));
    }
    let model = elm_train(&manifest_features(train)?, &train.labels(), train.num_classes(), hidden_units, seed)?
        .with_classes(train.class_names())?;
    let report = evaluate_elm(&model, &split.test)?;
    Ok((model, report))
}

pub fn evaluate_elm(model: &ElmModel, test: &DatasetManifest) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Empty("test manifest has no records".into()));
    }
    let truth = labels_by_name(&model.classes, test)?;
    let predicted = model.predict(&manifest_features(test)?)?;
    EvalReport::from_predictions(model.classes.clone(), &truth, &predicted)
}
